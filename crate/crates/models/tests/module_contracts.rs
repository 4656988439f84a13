//! Head gradients against finite differences and module interface contracts.

use candle_core::{DType, Device, Tensor, Var};
use dap_core::BBox;
use dap_models::detector::{
    select_top_boxes, Backbone, Detection, DetectorConfig, FrameActionOutput, FrameDetections, PersonDetector, FRAME_FEATURE_DIM,
};
use dap_models::loss::scalar;
use dap_models::part_parser::{PartParser, PartParserConfig, PartVariant};
use dap_models::{ModelError, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>(), shape, &Device::Cpu).unwrap()
}

/// Checks `d loss / d param` for a few entries of every parameter whose name
/// contains `filter`, where `loss` is a fixed random projection of `out()`.
fn check_parameter_grads(store: &ParamStore, filter: &str, out: impl Fn() -> Tensor) {
    let probe = out();
    let weights = random(probe.dims(), 99, -1.0, 1.0);
    let loss = || scalar(&(out() * &weights).unwrap().sum_all().unwrap()).unwrap();
    let grads = (out() * &weights).unwrap().sum_all().unwrap().backward().unwrap();
    let names: Vec<(String, Var)> = store
        .vars()
        .filter(|(n, _)| n.contains(filter))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    assert!(!names.is_empty(), "no parameters match {filter}");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut num, mut den) = (0.0, 0.0);
    for (name, var) in &names {
        let analytic: Vec<f64> = grads.get(var).unwrap_or_else(|| panic!("{name} has no gradient")).flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let shape = var.as_tensor().dims().to_vec();
        for _ in 0..4 {
            let i = rng.random_range(0..base.len());
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                loss()
            };
            let numeric = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            num += (analytic[i] - numeric).powi(2);
            den += analytic[i].powi(2).max(numeric.powi(2));
        }
    }
    let rel = if den == 0.0 { 0.0 } else { (num / den).sqrt() };
    assert!(rel <= 1e-3, "{filter}: relative gradient error {rel}");
}

fn small_detector(store: &mut ParamStore) -> PersonDetector {
    let cfg = DetectorConfig {
        trunk_channels: vec![4, 4, 4],
        ..DetectorConfig::default()
    };
    PersonDetector::new(cfg, &mut store.root().pp("detector")).unwrap()
}

fn small_parser(store: &mut ParamStore, variant: PartVariant) -> PartParser {
    let cfg = PartParserConfig {
        input_height: 16,
        input_width: 8,
        trunk_channels: vec![4, 4, 48],
        variant,
        ..PartParserConfig::default()
    };
    PartParser::new(cfg, &mut store.root().pp("part_parser")).unwrap()
}

#[test]
fn ap_rcnn_gradients() {
    let mut store = ParamStore::new(DType::F64, 1);
    let det = small_detector(&mut store);
    let roi = random(&[1, 256, 7, 7], 3, 0.0, 1.0);
    check_parameter_grads(&store, "ap_rcnn", || {
        let (f, logits) = det.ap_rcnn_forward(&roi).unwrap();
        Tensor::cat(&[f, logits], 1).unwrap()
    });
}

#[test]
fn frame_head_gradients_and_mean_oracle() {
    let mut store = ParamStore::new(DType::F64, 2);
    let det = small_detector(&mut store);
    let features = random(&[2, FRAME_FEATURE_DIM, 3, 2], 4, 0.0, 1.0);
    let (f_c, _) = det.gcp_forward(&features).unwrap();
    let v: Vec<f64> = features.flatten_all().unwrap().to_vec1().unwrap();
    let got: Vec<Vec<f64>> = f_c.to_vec2().unwrap();
    for n in 0..2 {
        for c in 0..FRAME_FEATURE_DIM {
            let base = (n * FRAME_FEATURE_DIM + c) * 6;
            let mean = v[base..base + 6].iter().sum::<f64>() / 6.0;
            assert!((got[n][c] - mean).abs() < 1e-12);
        }
    }
    check_parameter_grads(&store, "gcp", || det.gcp_forward(&features).unwrap().1);
}

#[test]
fn part_and_state_module_gradients() {
    let mut store = ParamStore::new(DType::F64, 3);
    let parser = small_parser(&mut store, PartVariant::StateVectorsFocal);
    let crops = random(&[2, 3, 16, 8], 5, -1.0, 1.0);
    let visual = parser.visual_forward(&crops).unwrap();
    assert_eq!(visual.dims()[1], 48);
    check_parameter_grads(&store, "ppm", || {
        let (f_pa, maps) = parser.ppm_forward(&visual).unwrap();
        Tensor::cat(&[f_pa, maps], 1).unwrap()
    });
    check_parameter_grads(&store, "spm", || {
        let (f_sta, logits) = parser.spm_forward(&visual).unwrap();
        Tensor::cat(&[f_sta, logits.flatten_from(1).unwrap()], 1).unwrap()
    });
    check_parameter_grads(&store, "visual", || parser.visual_forward(&crops).unwrap());
}

#[test]
fn detector_backbone_emits_2048_channels() {
    let mut store = ParamStore::new(DType::F32, 0);
    let det = small_detector(&mut store);
    let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let f = det.backbone_forward(&x).unwrap();
    let s = det.stride();
    assert_eq!(f.dims(), &[1, FRAME_FEATURE_DIM, 32 / s, 32 / s]);
}

struct Narrow;

impl Backbone for Narrow {
    fn forward(&self, images: &Tensor) -> dap_models::Result<Tensor> {
        Ok(images.clone())
    }
    fn out_channels(&self) -> usize {
        512
    }
    fn stride(&self) -> usize {
        1
    }
}

#[test]
fn wrong_backbone_width_is_a_config_error() {
    let mut store = ParamStore::new(DType::F32, 0);
    let r = PersonDetector::with_backbone(DetectorConfig::default(), &mut store.root(), Box::new(Narrow));
    assert!(matches!(r, Err(ModelError::Config(_))));
}

#[test]
fn top_boxes_break_ties_by_area_then_index() {
    let d = |x2: f64, score: f64| Detection {
        bbox: BBox::new(0.0, 0.0, x2, 10.0),
        score,
    };
    let frame = FrameDetections {
        boxes: vec![d(5.0, 0.9), d(8.0, 0.9), d(5.0, 0.9), d(20.0, 0.1), d(3.0, 0.95)],
        instances: vec![],
        frame: FrameActionOutput {
            feature: vec![],
            logits: vec![],
        },
    };
    assert_eq!(select_top_boxes(&frame, 10), vec![4, 1, 0, 2, 3]);
    assert_eq!(select_top_boxes(&frame, 2), vec![4, 1]);
    assert!(select_top_boxes(&frame, 0).is_empty());
}

#[test]
fn heatmap_channels_per_variant() {
    let (k, s) = (4, 3);
    for (variant, want) in [
        (PartVariant::Shared, k * s),
        (PartVariant::SeparatedHeatmaps, k + s),
        (PartVariant::StateVectors, k),
        (PartVariant::StateVectorsFocal, k),
    ] {
        assert_eq!(variant.heatmap_channels(k, s), want);
        let mut store = ParamStore::new(DType::F32, 0);
        let parser = small_parser(&mut store, variant);
        let crops = Tensor::zeros((1, 3, 16, 8), DType::F32, &Device::Cpu).unwrap();
        let fwd = parser.forward(&crops).unwrap();
        assert_eq!(fwd.heatmaps.dims(), &[1, want, 4, 2]);
        assert_eq!(fwd.state_logits.dims(), &[1, k, s]);
        assert_eq!(fwd.state_features.dims(), &[1, 192]);
        assert_eq!(variant.to_string().parse::<PartVariant>().unwrap(), variant);
    }
    assert!(matches!("bogus".parse::<PartVariant>(), Err(ModelError::Config(_))));
}
