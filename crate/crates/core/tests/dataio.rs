use std::path::Path;

use gaitset::dataio::{load_dataset, synth_generate, write_frame, DatasetIndex, ProtocolSpec, SynthSpec, CASIA_TEMPLATE};
use gaitset::network::{FRAME_HEIGHT, FRAME_WIDTH};

/// One blank frame per sequence of a CASIA-shaped tree: `ids` identities,
/// 11 views, NM#1-6, BG#1-2, CL#1-2.
fn casia_tree(root: &Path, ids: usize) {
    let frame = vec![0.0f32; FRAME_HEIGHT * FRAME_WIDTH];
    let seqs = [("nm", 6), ("bg", 2), ("cl", 2)];
    for id in 1..=ids {
        for (cond, n) in seqs {
            for s in 1..=n {
                for v in (0..=180).step_by(18) {
                    let dir = root.join(format!("{id:03}/{cond}-{s:02}/{v:03}"));
                    std::fs::create_dir_all(&dir).unwrap();
                    write_frame(&dir.join("001.png"), &frame).unwrap();
                }
            }
        }
    }
}

#[test]
fn casia_protocol_splits() {
    let dir = tempfile::tempdir().unwrap();
    casia_tree(dir.path(), 124);
    let index = DatasetIndex::scan(dir.path(), CASIA_TEMPLATE).unwrap();
    assert_eq!(index.len(), 124 * 10 * 11);
    for (name, train) in [("ST", 24), ("MT", 62), ("LT", 74)] {
        let split = ProtocolSpec::preset(name).unwrap().split(&index).unwrap();
        let test = 124 - train;
        assert_eq!((split.train_ids.len(), split.test_ids.len()), (train, test), "{name}");
        assert_eq!(split.train.len(), train * 110);
        assert_eq!(split.gallery.len(), test * 11 * 4, "{name} gallery");
        let sizes: Vec<(&str, usize)> = split.probes.iter().map(|(n, e)| (n.as_str(), e.len())).collect();
        assert_eq!(sizes, [("NM", test * 22), ("BG", test * 22), ("CL", test * 22)]);
        assert!(split.train_ids.iter().all(|t| !split.test_ids.contains(t)));
    }
    let mc = ProtocolSpec::lt().multicondition().split(&index).unwrap();
    assert_eq!(mc.gallery.len(), 50 * 11 * 3);
}

#[test]
fn synthetic_data_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { identities: 4, views: vec![0, 90], frames: 6, ..SynthSpec::default() };
    assert_eq!(synth_generate(&spec, dir.path()).unwrap(), 4 * 2 * 3);
    let ds = load_dataset(dir.path(), CASIA_TEMPLATE, &ProtocolSpec::synth()).unwrap();
    assert_eq!(ds.index.len(), 24);
    assert_eq!(ds.split.train_ids.len(), 2);
    assert_eq!(ds.split.gallery.len(), 2 * 2);
    let sets = ds.load_train().unwrap();
    assert_eq!(sets.len(), 12);
    for s in &sets {
        assert_eq!(s.frames.shape(), &[6, 1, FRAME_HEIGHT, FRAME_WIDTH]);
        assert!(s.frames.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(s.frames.data().contains(&1.0));
    }
    let conditions: Vec<&str> = sets.iter().map(|s| s.key.condition.as_str()).collect();
    assert!(conditions.contains(&"BG") && conditions.contains(&"CL"));

    // Same spec, same bytes.
    let again = tempfile::tempdir().unwrap();
    synth_generate(&spec, again.path()).unwrap();
    let rel = "001/cl-01/090/003.png";
    assert_eq!(std::fs::read(dir.path().join(rel)).unwrap(), std::fs::read(again.path().join(rel)).unwrap());
}

#[test]
fn manifest_cache_matches_scan() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { identities: 2, views: vec![0], frames: 3, ..SynthSpec::default() };
    synth_generate(&spec, dir.path()).unwrap();
    let cache = dir.path().join("index.manifest");
    let a = DatasetIndex::scan_cached(dir.path(), CASIA_TEMPLATE, &cache).unwrap();
    assert!(cache.exists());
    let b = DatasetIndex::scan_cached(dir.path(), CASIA_TEMPLATE, &cache).unwrap();
    assert_eq!(a.entries(), b.entries());
}

#[test]
fn bad_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(DatasetIndex::scan(&dir.path().join("missing"), CASIA_TEMPLATE).unwrap_err().exit_code(), 3);
    assert_eq!(DatasetIndex::scan(dir.path(), CASIA_TEMPLATE).unwrap_err().exit_code(), 3);
    let p = dir.path().join("001/nm-01/000/001.png");
    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
    std::fs::write(&p, b"not a png").unwrap();
    let index = DatasetIndex::scan(dir.path(), CASIA_TEMPLATE).unwrap();
    assert_eq!(index.load(0).unwrap_err().exit_code(), 3);
}
