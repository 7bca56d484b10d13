use regex::Regex;

use super::SequenceKey;
use crate::error::{Error, Result};

/// Directory layout of CASIA-B style trees.
pub const CASIA_TEMPLATE: &str = "<id>/<condition>-<seq>/<view>/<frame>.png";

const FIELDS: [&str; 5] = ["id", "condition", "seq", "view", "frame"];

/// A path pattern with `<id>`, `<condition>`, `<seq>`, `<view>` and
/// `<frame>` placeholders. `<id>`, `<view>` and `<frame>` are required and
/// `<frame>` must sit in the last path component. Missing `<condition>`
/// reads as `NM`, missing `<seq>` as 1.
#[derive(Clone, Debug)]
pub struct LayoutTemplate {
    file: Regex,
    dir: Regex,
}

impl LayoutTemplate {
    pub fn parse(template: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("layout template {template:?}: {why}"));
        for f in ["id", "view", "frame"] {
            if !template.contains(&format!("<{f}>")) {
                return Err(bad(&format!("missing <{f}>")));
            }
        }
        let (dir_part, last) = template.rsplit_once('/').ok_or_else(|| bad("needs at least one directory level"))?;
        if !last.contains("<frame>") || dir_part.contains("<frame>") {
            return Err(bad("<frame> must appear only in the file name"));
        }
        Ok(Self {
            file: Regex::new(&format!("^{}$", to_regex(template, &bad)?)).expect("escaped pattern"),
            dir: Regex::new(&format!("^{}$", to_regex(dir_part, &bad)?)).expect("escaped pattern"),
        })
    }

    /// Whether a relative directory path is a sequence directory.
    pub fn matches_dir(&self, rel: &str) -> bool {
        self.dir.is_match(rel)
    }

    /// Key of a relative frame path, or `None` if it does not match.
    pub fn match_file(&self, rel: &str) -> Result<Option<SequenceKey>> {
        let Some(c) = self.file.captures(rel) else {
            return Ok(None);
        };
        let num = |name: &str, default: u32| -> Result<u32> {
            match c.name(name) {
                Some(m) => m.as_str().parse().map_err(|_| Error::Data(format!("{rel}: bad {name} {:?}", m.as_str()))),
                None => Ok(default),
            }
        };
        let view = num("view", 0)?;
        if view > 360 {
            return Err(Error::Data(format!("{rel}: view {view} out of range")));
        }
        Ok(Some(SequenceKey {
            identity: c["id"].to_string(),
            condition: c.name("condition").map_or("NM".to_string(), |m| m.as_str().to_uppercase()),
            seq: num("seq", 1)?,
            view,
        }))
    }
}

fn to_regex(template: &str, bad: &dyn Fn(&str) -> Error) -> Result<String> {
    let mut out = String::new();
    let mut rest = template;
    let mut seen = Vec::new();
    while let Some(open) = rest.find('<') {
        out.push_str(&regex::escape(&rest[..open]));
        let close = rest[open..].find('>').ok_or_else(|| bad("unclosed placeholder"))? + open;
        let name = &rest[open + 1..close];
        if !FIELDS.contains(&name) {
            return Err(bad(&format!("unknown placeholder <{name}>")));
        }
        if seen.contains(&name) {
            return Err(bad(&format!("<{name}> appears twice")));
        }
        seen.push(name);
        let class = match name {
            "seq" | "view" => r"\d+",
            "condition" => r"[A-Za-z]+",
            _ => r"[^/]+?",
        };
        out.push_str(&format!("(?P<{name}>{class})"));
        rest = &rest[close + 1..];
    }
    out.push_str(&regex::escape(rest));
    Ok(out)
}
