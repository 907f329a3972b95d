mod common;

use common::*;
use neuroflow::dram_image::*;
use neuroflow::graph_ir::{ApplicationGraph, TensorSpec};
use neuroflow::partitioner::{map_model, ChipDescriptor};
use neuroflow::pipeline::CompileOptions;

fn mnist() -> neuroflow::pipeline::Compiled {
    compile_mnist(3, &CompileOptions::default())
}

#[test]
fn parse_inverts_serialize() {
    let c = mnist();
    let bytes = c.image.serialize();
    assert_eq!(DramImage::parse(&bytes).unwrap(), c.image);
    assert_eq!(bytes.len(), c.image.total_len());
}

#[test]
fn global_layout_matches_hand_computed_sizes() {
    let c = mnist();
    let g = &c.image.global;
    assert_eq!(g.magic, MAGIC);
    assert_eq!(g.num_layers, 4);
    assert_eq!(g.num_pes, 152);
    // 16 fixed words + 152 table words = 672 bytes, already 16-aligned.
    assert_eq!(GlobalConfig::byte_len(152), 672);
    assert_eq!(g.timing_area_addr, 672);
    // 4 layers x (scheduler + 8 workers) + the setup/cleanup record.
    assert_eq!(g.timing_slots, 9);
    assert_eq!(g.timing_area_len, (4 * 9 + 1) * 16);
    assert_eq!(g.enabled_workers().count(), 8);
    assert_eq!(g.input_len, 784);
    assert_eq!(g.output_len, 16);
}

#[test]
fn header_chain_ends_at_finish() {
    let c = mnist();
    let chain = c.image.header_chain();
    assert_eq!(chain.len(), 5);
    assert_eq!(chain[0], c.image.global.first_layer_addr);
    assert!(chain.windows(2).all(|w| w[0] < w[1]));
    let fin = LayerHeader::decode(c.image.bytes(), *chain.last().unwrap() as usize).unwrap();
    assert!(fin.is_finish());
    let kinds: Vec<LayerType> = c.image.layers.iter().map(|l| l.header.kind().unwrap()).collect();
    assert_eq!(layer_names(&kinds), ["FC1+ReLU", "FC2+ReLU", "FC3", "Softmax"]);
}

#[test]
fn regions_tile_the_image_without_gaps() {
    let c = mnist();
    let r = c.image.regions;
    assert_eq!(r[0].offset, 0);
    for w in r.windows(2) {
        assert_eq!(w[0].end(), w[1].offset);
    }
    assert_eq!(r[3].end() as usize, c.image.total_len());
    assert!(r.iter().all(|r| r.offset as usize % ALIGN == 0));
}

#[test]
fn worker_slices_hold_the_weight_rows() {
    let c = mnist();
    let w = c.lowered.constant("fc1.w").unwrap();
    let layer = &c.image.layers[0];
    let tile = layer.workers[0].tile_out as usize;
    assert_eq!(tile, 64);
    for (k, block) in layer.workers.iter().enumerate() {
        let mut got = Vec::new();
        for ch in &block.chunks {
            got.extend_from_slice(&c.image.bytes()[ch.addr as usize..(ch.addr + ch.len) as usize]);
        }
        assert_eq!(got, w[k * tile * 784..(k + 1) * tile * 784], "worker {k}");
    }
    let b = c.lowered.constant("fc1.b").unwrap();
    let at = layer.workers[1].bias_addr as usize;
    assert_eq!(&c.image.bytes()[at..at + 4 * tile], &b[4 * tile..8 * tile]);
}

#[test]
fn manifest_locates_named_objects() {
    let c = mnist();
    let m = &c.manifest;
    let input = m.locate("graph_input").unwrap();
    assert_eq!(input.len, 784);
    assert_eq!(input.region, RegionKind::Data);
    assert_eq!(input.absolute, c.image.global.input_addr);
    assert_eq!(input.absolute, input.region_offset + c.image.region(RegionKind::Data).offset);
    assert_eq!(m.locate("layer:0").unwrap().absolute, c.image.global.first_layer_addr);
    assert_eq!(m.locate("finish").unwrap().absolute, c.image.finish_addr);
    assert_eq!(m.locate("graph_output").unwrap().len, 16);
    assert!(matches!(m.locate("no_such_tensor"), Err(ImageError::UnknownSymbol(s)) if s == "no_such_tensor"));
    let back: ImageManifest = serde_json::from_str(&serde_json::to_string(m).unwrap()).unwrap();
    assert_eq!(&back, m);
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = mnist().image.serialize();
    bytes[0] ^= 0xff;
    assert!(matches!(DramImage::parse(&bytes), Err(ImageError::BadMagic(_))));
}

#[test]
fn truncation_names_the_offset() {
    let bytes = mnist().image.serialize();
    let cut = bytes.len() - 100;
    match DramImage::parse(&bytes[..cut]) {
        Err(e @ ImageError::Truncated { offset, .. }) => {
            assert_eq!(offset, cut);
            assert!(e.to_string().contains(&format!("{cut:#x}")));
        }
        other => panic!("expected truncation, got {other:?}"),
    }
}

#[test]
fn misaligned_first_layer_is_rejected() {
    let mut bytes = mnist().image.serialize();
    let w = read_u32(&bytes, 16).unwrap() + 4;
    bytes[16..20].copy_from_slice(&w.to_le_bytes());
    assert!(matches!(DramImage::parse(&bytes), Err(ImageError::Misaligned { .. })));
}

#[test]
fn broken_chain_is_rejected() {
    let c = mnist();
    let mut bytes = c.image.serialize();
    // Point the first header back at itself.
    let at = c.image.global.first_layer_addr as usize + 8;
    bytes[at..at + 4].copy_from_slice(&c.image.global.first_layer_addr.to_le_bytes());
    assert!(DramImage::parse(&bytes).is_err());
}

#[test]
fn build_is_deterministic() {
    assert_eq!(mnist().image.serialize(), mnist().image.serialize());
}

#[test]
fn oversized_image_is_rejected() {
    let c = mnist();
    let mut chip = ChipDescriptor::default();
    chip.dram_bytes = 4096;
    let err = build_image(&c.lowered, &c.order, &c.plans, &c.mapping, &chip).unwrap_err();
    assert!(matches!(err, ImageError::TooLarge { capacity: 4096, .. }));
}

#[test]
fn missing_plan_is_reported() {
    let c = mnist();
    let err = build_image(&c.lowered, &c.order, &c.plans[1..], &c.mapping, &ChipDescriptor::default()).unwrap_err();
    assert!(matches!(err, ImageError::Unplanned(id) if id == c.order[0].id));
}

#[test]
fn empty_model_has_only_the_finish_header() {
    let mut g = ApplicationGraph::default();
    g.add_tensor(TensorSpec::i8("x", vec![8], -7));
    g.graph_inputs.push("x".into());
    g.graph_outputs.push("x".into());
    let chip = ChipDescriptor::default();
    let mapping = map_model(&[], &chip).unwrap();
    let built = build_image(&g, &[], &[], &mapping, &chip).unwrap();
    let parsed = DramImage::parse(&built.image.serialize()).unwrap();
    assert_eq!(parsed.global.num_layers, 0);
    assert_eq!(parsed.header_chain(), vec![parsed.global.first_layer_addr]);
}
