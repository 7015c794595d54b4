use basinscape::graph::{assign_power, generate_topology, parse_graph_json, GrowthParams};
use basinscape::io::{
    export_training_labels, read_graph, read_heatmaps_csv, read_labels_csv, write_graph, write_labels_csv,
    DatasetError, FillPolicy,
};
use basinscape::landscape::Landscape;

#[test]
fn graph_json_roundtrip_and_canonical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10 {
        let g = assign_power(generate_topology(&GrowthParams::default(), seed).unwrap(), seed, seed).unwrap();
        let path = dir.path().join(format!("g{seed}.json"));
        write_graph(&path, &g).unwrap();
        assert_eq!(read_graph(&path).unwrap(), g);

        let mut shuffled = g.clone();
        shuffled.edges.reverse();
        let other = dir.path().join("shuffled.json");
        write_graph(&other, &shuffled).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&other).unwrap());
    }
}

#[test]
fn graph_without_power_is_rejected() {
    let err = parse_graph_json(r#"{"num_nodes": 2, "edges": [[0, 1]]}"#).unwrap_err();
    assert!(err.to_string().contains("power"), "{err}");
}

#[test]
fn labels_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<_> = (0..3)
        .map(|node| {
            let mut ls = Landscape::empty(node, 4);
            for k in 0..16 {
                ls.total_counts[k] = (k as u32 * 3 + node as u32) % 7;
                ls.stable_counts[k] = ls.total_counts[k] / 3;
            }
            export_training_labels(&ls, FillPolicy::NeighborMean)
        })
        .collect();
    let path = dir.path().join("labels.csv");
    write_labels_csv(&path, &labels).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("node,m,n,label,count,mask\n"));
    assert_eq!(read_labels_csv(&path, 4).unwrap(), labels);

    let maps = read_heatmaps_csv(&path, 4).unwrap();
    assert_eq!(maps.len(), 3);
    assert_eq!(maps[&1][5], labels[1].labels[5] as f64);
}

#[test]
fn incomplete_heatmap_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    std::fs::write(&path, "node,m,n,label,extra\n0,0,0,0.5,x\n0,0,1,0.5,y\n0,1,0,0.5,z\n").unwrap();
    assert!(matches!(read_heatmaps_csv(&path, 2), Err(DatasetError::Format(_))));
    std::fs::write(&path, "node,m,n,label\n0,0,0,1.5\n").unwrap();
    assert!(matches!(read_heatmaps_csv(&path, 1), Err(DatasetError::Format(_))));
}
