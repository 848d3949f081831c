use portrait_refine::synthdata::{
    make_bundle, read_dataset, regenerate, sample_identity_in, write_dataset, CameraPose,
    IdentityRegime, Manifest, MANIFEST_FILE,
};
use portrait_refine::Error;

fn bundles(seeds: &[u64], regime: &IdentityRegime) -> Vec<portrait_refine::synthdata::SceneBundle> {
    seeds
        .iter()
        .map(|&s| {
            let poses = [
                CameraPose::yaw(-45.0),
                CameraPose {
                    yaw: 30.0,
                    pitch: 5.0,
                    distance: 1.1,
                },
            ];
            make_bundle(&sample_identity_in(s, regime), &poses, 32).unwrap()
        })
        .collect()
}

#[test]
fn write_read_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let regime = IdentityRegime::NARROW_DETAILED;
    let written = bundles(&[3, 9, 27], &regime);
    let manifest = write_dataset(&written, dir.path(), "train", &regime).unwrap();
    assert_eq!(manifest.bundles.len(), 3);
    assert_eq!(Manifest::load(dir.path()).unwrap(), manifest);

    let (m, read) = read_dataset(dir.path()).unwrap();
    assert_eq!(m.hash(), manifest.hash());
    assert_eq!(read, written);
}

#[test]
fn regenerate_reproduces_every_file_hash() {
    let dir = tempfile::tempdir().unwrap();
    let regime = IdentityRegime::BROAD;
    let manifest = write_dataset(&bundles(&[1, 2], &regime), dir.path(), "eval", &regime).unwrap();
    let again = regenerate(&manifest).unwrap();
    let other = tempfile::tempdir().unwrap();
    let rewritten = write_dataset(&again, other.path(), "eval", &regime).unwrap();
    assert_eq!(rewritten, manifest);
    assert_eq!(rewritten.hash(), manifest.hash());

    let mut stale = manifest.clone();
    stale.generator_version = "older/0".into();
    assert!(matches!(regenerate(&stale), Err(Error::Integrity(_))));
}

#[test]
fn missing_and_corrupt_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let regime = IdentityRegime::BROAD;
    let manifest = write_dataset(&bundles(&[5, 6], &regime), dir.path(), "train", &regime).unwrap();
    let victim = &manifest.bundles[1].files[2];
    std::fs::remove_file(dir.path().join(victim)).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)));
    assert!(err.to_string().contains(victim.as_str()), "{err}");

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&bundles(&[5], &regime), dir.path(), "train", &regime).unwrap();
    let name = &manifest.bundles[0].files[0];
    let other = bundles(&[8], &regime).remove(0).reference;
    other.save_png(&dir.path().join(name)).unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(
        err.to_string().contains(name.as_str()) && err.to_string().contains("hash"),
        "{err}"
    );

    std::fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Integrity(_))));
}

#[test]
fn splits_must_be_identity_disjoint() {
    let dir = tempfile::tempdir().unwrap();
    let regime = IdentityRegime::BROAD;
    let train = write_dataset(
        &bundles(&[1, 2, 3], &regime),
        &dir.path().join("t"),
        "train",
        &regime,
    )
    .unwrap();
    let eval = write_dataset(
        &bundles(&[4, 5], &regime),
        &dir.path().join("e"),
        "eval",
        &regime,
    )
    .unwrap();
    train.ensure_disjoint(&eval).unwrap();
    let leaky = write_dataset(
        &bundles(&[5, 3], &regime),
        &dir.path().join("l"),
        "eval",
        &regime,
    )
    .unwrap();
    let err = train.ensure_disjoint(&leaky).unwrap_err();
    assert!(err.to_string().contains('3'), "{err}");
}
