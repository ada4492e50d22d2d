//! Cost model against hand-derived counts and the shipped configs.

use std::path::PathBuf;

use pointctx::costmodel::{
    attention_score_flops, compare, count_flops, count_params, fsa_layer_params, linear_flops,
    load_config, parse_config, serialize_config, ArchConfig,
};

fn arch(name: &str) -> ArchConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/arch").join(format!("{name}.toml"));
    load_config(p).unwrap()
}

const SINGLE_BLOCK: &str = r#"
name = "block"
backbone = "pointpillars"
[input]
nodes = 100
[pfn]
in_features = 10
filters = [64]
points_per_node = 32
[[attention]]
stage = "pillar"
kind = "fsa"
layers = 1
heads = 4
dim = 64
in_dim = 64
"#;

#[test]
fn single_block_parameters_by_hand() {
    let d = 64u64;
    assert_eq!(fsa_layer_params(64, 64), 4 * d * d + 5 * d);
    let with = count_params(&parse_config(SINGLE_BLOCK).unwrap()).unwrap();
    let without_doc = SINGLE_BLOCK.split("[[attention]]").next().unwrap();
    let without = count_params(&parse_config(without_doc).unwrap()).unwrap();
    assert_eq!(with.total_params - without.total_params, 4 * d * d + 5 * d);
}

#[test]
fn one_linear_layer_flops() {
    assert_eq!(linear_flops(10, 4, 8), 640);
}

#[test]
fn quarter_subset_scores_cost_one_sixteenth() {
    let full = attention_score_flops(4000, 64);
    let sub = attention_score_flops(1000, 64);
    assert_eq!(full, 16 * sub);
}

#[test]
fn identical_configs_change_nothing() {
    let pp = arch("pp");
    let c = compare(&pp, &pp, None).unwrap();
    assert_eq!(c.params_change_pct, 0.0);
    let c = compare(&pp, &pp, Some(6000)).unwrap();
    assert_eq!(c.flops_change_pct, 0.0);
}

#[test]
fn shipped_pillar_configs_have_expected_shape() {
    let pp = arch("pp");
    assert_eq!(pp.bev2d.as_ref().unwrap().num_filters, vec![64, 128, 256]);
    assert!(pp.attention.is_empty());
    let fpp = arch("fsa_pp");
    assert_eq!(fpp.bev2d.as_ref().unwrap().num_filters, vec![64, 64, 64]);
    let a = &fpp.attention[0];
    assert_eq!((a.heads, a.layers, a.dim), (4, 2, 64));
}

#[test]
fn heads_must_divide_dim() {
    let doc = SINGLE_BLOCK.replace("heads = 4", "heads = 3");
    let err = parse_config(&doc).unwrap_err().to_string();
    assert!(err.contains("heads"), "{err}");
}

#[test]
fn every_shipped_config_round_trips() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/arch");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "toml") {
            continue;
        }
        let cfg = load_config(&path).unwrap();
        let back = parse_config(&serialize_config(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back, "{}", path.display());
        assert_eq!(count_params(&cfg).unwrap(), count_params(&back).unwrap());
        seen += 1;
    }
    assert_eq!(seen, 15);
}

#[test]
fn attention_flops_grow_quadratically_in_nodes() {
    let f = arch("fsa_pp");
    let a = count_flops(&f, 2000).unwrap().attention_score_flops();
    let b = count_flops(&f, 4000).unwrap().attention_score_flops();
    assert_eq!(b, 4 * a);
}

#[test]
fn parameters_do_not_depend_on_nodes() {
    for name in ["fsa_pp", "dsa_pp", "fsa_second", "dsa_pvrcnn"] {
        let c = arch(name);
        let a = count_params(&c.with_nodes(10_000)).unwrap().total_params;
        let b = count_params(&c.with_nodes(1_000_000)).unwrap().total_params;
        assert_eq!(a, b, "{name}");
    }
}
