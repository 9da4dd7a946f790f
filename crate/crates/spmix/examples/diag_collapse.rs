//! scratch diagnostic: initial embedding diversity on the synthetic set
use spmix::config::RunConfig;
use spmix::dataset::{LoadedDataset, Manifest};
use spmix::encoder::*;
use spmix::tensor::Graph;
use spmix::imaging::ImageTensor;
use std::path::Path;

fn main() {
    let cfg = RunConfig::default();
    let enc = cfg.encoder_config();
    let manifest = Manifest::load(Path::new("/tmp/spmixdata/train.tsv")).unwrap();
    let ds = LoadedDataset::load(&manifest, Path::new("/tmp/spmixdata"), enc.input_size).unwrap();
    let params = init_encoder_params(&enc, 1).unwrap();
    let mut picks = Vec::new();
    for c in 0..ds.class_count() { for i in 0..6.min(ds.by_class[c].len()) { picks.push(ds.by_class[c][i]); } }
    let imgs: Vec<&ImageTensor> = picks.iter().map(|&i| &ds.images[i]).collect();
    let mut g = Graph::new();
    let x = image_batch(&imgs).unwrap();
    let pooled = encode_pooled(&mut g, &x, &params, &enc).unwrap();
    let z = project_normalize(&mut g, &pooled, &params, &enc).unwrap();
    let b = picks.len();
    let d = enc.proj_dim;
    let dim = enc.token_dim;
    let mut fmean = vec![0.0; dim];
    for row in pooled.data().chunks_exact(dim) { for (m, v) in fmean.iter_mut().zip(row) { *m += v / b as f64; } }
    let fnorm: f64 = fmean.iter().map(|v| v*v).sum::<f64>().sqrt();
    let mut dev = 0.0;
    for row in pooled.data().chunks_exact(dim) {
        dev += row.iter().zip(&fmean).map(|(v, m)| (v - m)*(v - m)).sum::<f64>();
    }
    let dev = (dev / b as f64).sqrt();
    println!("pooled: ||mean|| = {fnorm:.4}, rms deviation = {dev:.6}, ratio = {:.2e}", dev / fnorm);
    let zd = z.data();
    let mut min_cos = 1.0f64; let mut max_cos = -1.0f64; let mut sum = 0.0; let mut n = 0;
    for i in 0..b { for j in i+1..b {
        let cos: f64 = (0..d).map(|k| zd[i*d+k]*zd[j*d+k]).sum();
        min_cos = min_cos.min(cos); max_cos = max_cos.max(cos); sum += cos; n += 1;
    }}
    println!("z cosines: min {min_cos:.8} mean {:.8} max {max_cos:.8}", sum / n as f64);
}
