//! Projects 24 embeddings of 6 subjects (4 each) to 2-D and writes the
//! scatter data as CSV.
//!
//! cargo run --release --example pca_scatter -- [out.csv]

use diverid::embedding::{EmbeddingConfig, EmbeddingModel};
use diverid::evalkit::{emit_scatter, pca_fit};
use diverid::synth::Cohort;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "scatter.csv".into());
    let cohort = Cohort::new(6, 64, 9);
    let model = EmbeddingModel::new(EmbeddingConfig { dim: 128, classes: 6, input_size: 32, ..Default::default() }, 1)?;
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for s in 0..6 {
        for k in 0..4 {
            items.push((cohort.photo(s, k)?.0, None));
            labels.push(Cohort::subject_id(s));
        }
    }
    let data: Vec<Vec<f64>> = model
        .extract_batch(&items)?
        .iter()
        .map(|e| e.as_slice().iter().map(|&v| v as f64).collect())
        .collect();
    let pca = pca_fit(&data, 2)?;
    emit_scatter(&pca, &data, &labels, std::path::Path::new(&out))?;
    println!("explained variance {:.3} + {:.3}; wrote {} rows to {out}", pca.explained[0], pca.explained[1], data.len());
    Ok(())
}
