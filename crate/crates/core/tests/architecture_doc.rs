use stereoqa_core::network::{parameter_count, LayerKind, LAYERS};

fn doc_rows() -> Vec<(String, String, usize, usize, usize)> {
    let text = include_str!("../../../docs/architecture.md");
    let layers = text.split("## Layers").nth(1).expect("layers section");
    layers
        .lines()
        .filter(|l| l.starts_with('|') && !l.contains("---") && !l.contains("parameters"))
        .map(|l| {
            let cells: Vec<&str> = l.trim_matches('|').split('|').map(str::trim).collect();
            assert_eq!(cells.len(), 5, "{l}");
            let num = |s: &str| s.parse::<usize>().unwrap_or_else(|_| panic!("{s:?} in {l}"));
            (cells[0].to_string(), cells[1].to_string(), num(cells[2]), num(cells[3]), num(cells[4]))
        })
        .collect()
}

#[test]
fn layer_table_matches_the_network() {
    let rows = doc_rows();
    assert_eq!(rows.len(), LAYERS.len());
    for ((name, kind, fin, fout, params), spec) in rows.iter().zip(LAYERS.iter()) {
        assert_eq!(name, spec.name);
        let (k, i, o) = match spec.kind {
            LayerKind::Conv { cin, cout } => ("conv", cin, cout),
            LayerKind::Dense { fin, fout } => ("dense", fin, fout),
        };
        assert_eq!((kind.as_str(), *fin, *fout), (k, i, o), "{name}");
        assert_eq!(*params, spec.parameter_count(), "{name}");
    }
}

#[test]
fn documented_total_is_the_parameter_count() {
    let total: usize = doc_rows().iter().map(|r| r.4).sum();
    assert_eq!(total, 15_187_437);
    assert_eq!(total, parameter_count());
}
