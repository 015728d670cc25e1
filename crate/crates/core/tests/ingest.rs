use probcodec::codec::ingest::{ingest, list_images, Manifest, Source, MANIFEST_NAME};
use probcodec::codec::synth::{synthetic_image, synthetic_images};
use probcodec::codec::{load_image, save_png, Image};

fn write_inputs(dir: &std::path::Path) {
    save_png(&dir.join("a.png"), &synthetic_image(1, 0, 40, 33)).unwrap();
    save_png(&dir.join("b.png"), &synthetic_image(1, 1, 16, 16)).unwrap();
    let rgb = Image::new(20, 18, 3, (0..20 * 18 * 3).map(|v| (v % 251) as u8).collect()).unwrap();
    save_png(&dir.join("c.png"), &rgb).unwrap();
    std::fs::write(dir.join("d.png"), b"\x89PNG\r\n\x1a\nbroken").unwrap();
}

#[test]
fn corrupt_files_are_skipped_and_recorded() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_inputs(src.path());
    let m = ingest(&[Source::Dir(src.path().into())], out.path(), 8).unwrap();
    assert_eq!(m.entries.len(), 3);
    assert_eq!(m.skipped.len(), 1);
    assert!(m.skipped[0].source.ends_with("d.png"));
    let a = load_image(&out.path().join("a.png")).unwrap();
    assert_eq!((a.width, a.height), (40, 32));
    let c = load_image(&out.path().join("c.png")).unwrap();
    assert_eq!((c.width, c.height, c.channels), (16, 16, 3));
    let on_disk: Manifest =
        serde_json::from_str(&std::fs::read_to_string(out.path().join(MANIFEST_NAME)).unwrap()).unwrap();
    assert_eq!(on_disk, m);
    assert_eq!(list_images(out.path()).unwrap().len(), 3);
}

#[test]
fn rerunning_is_idempotent() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_inputs(src.path());
    let first = ingest(&[Source::Dir(src.path().into())], out.path(), 4).unwrap();
    let second = ingest(&[Source::Dir(src.path().into())], out.path(), 4).unwrap();
    assert_eq!(first, second);
    // the output directory itself can be ingested again without change
    let third = ingest(&[Source::Dir(out.path().into())], tempfile::tempdir().unwrap().path(), 4).unwrap();
    let sums = |m: &Manifest| m.entries.iter().map(|e| e.sha256.clone()).collect::<Vec<_>>();
    assert_eq!(sums(&third), sums(&first));
}

#[test]
fn synthetic_mode_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let src = Source::Synthetic { seed: 42, count: 5, width: 32, height: 32 };
    let ma = ingest(&[src.clone()], a.path(), 16).unwrap();
    let mb = ingest(&[src], b.path(), 16).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.entries.len(), 5);
    let imgs = synthetic_images(42, 5, 32, 32);
    let first = load_image(&a.path().join(&ma.entries[0].file)).unwrap();
    assert_eq!(first, imgs[0]);
    assert_ne!(imgs[0], imgs[1]);
}

#[test]
fn missing_url_list_is_an_error() {
    let out = tempfile::tempdir().unwrap();
    assert!(ingest(&[Source::UrlList("/nonexistent/list.txt".into())], out.path(), 4).is_err());
}

#[test]
fn unreachable_urls_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let list = dir.path().join("urls.txt");
    std::fs::write(&list, "# comment\nhttp://127.0.0.1:9/none.png\n\n").unwrap();
    let m = ingest(&[Source::UrlList(list)], &dir.path().join("out"), 4).unwrap();
    assert_eq!(m.entries.len(), 0);
    assert_eq!(m.skipped.len(), 1);
}
