use ecore_web::{correlation, otsu, topology};

#[test]
fn otsu_separates_the_two_high_values() {
    let r = otsu(&[5.0, 4.9, 0.1, 0.0]).unwrap();
    assert_eq!(r.relevant.into_iter().collect::<Vec<_>>(), [0, 1]);
    assert!(otsu(&[1.0]).is_err());
}

#[test]
fn topology_lists_cls_words_and_emotions() {
    let t = topology("I miss my dog so much", &[0.0, 0.075], 4).unwrap();
    assert_eq!(t.nodes[0], "[CLS]");
    assert_eq!(t.words, 7);
    assert_eq!(t.nodes.len(), 7 + 4);
    assert_eq!(t.intensity.len(), 6);
    assert_eq!(t.resolutions.len(), 2);
    assert_eq!(t.resolutions[0].active_words.len(), 7);
    assert!(t.resolutions[1].active_words.iter().all(|w| t.resolutions[0].active_words.contains(w)));
    assert!(t.resolutions[0].edges.contains(&(3, 0)));
    let json = serde_json::to_value(&t).unwrap();
    assert!(json["resolutions"][0]["edges"].is_array());
}

#[test]
fn topology_rejects_bad_thresholds() {
    assert!(topology("hello", &[0.1], 4).is_err());
    assert!(topology("hello", &[0.0, 0.3], 4).is_err());
}

#[test]
fn correlation_export_finds_planted_pairs() {
    let c = correlation(8, 512, &[(0, 1), (2, 3)], 0.8, 0.3, 0).unwrap();
    assert_eq!(c.export.edge_pairs(), [(0, 1), (2, 3)]);
    assert!(c.dot.starts_with("graph"));
}
