//! Evaluation metrics: alignment score and patch-Gram self-similarity
//! distance.

use serde::{Deserialize, Serialize};

use crate::embedder::TextImageEmbedder;
use crate::error::Result;
use crate::image::Image;
use crate::scalar::Scalar;
use crate::tape::no_grad;
use crate::toydata::{Caption, TaskCategory};

/// Cosine similarity between image and caption embeddings, scaled by 100.
pub fn alignment_score<T: Scalar>(
    img: &Image<T>,
    caption: &Caption,
    embedder: &dyn TextImageEmbedder<T>,
) -> Result<f64> {
    no_grad(|| {
        let ie = embedder.embed_image(&img.to_tensor())?;
        let te = embedder.embed_text(caption)?;
        let cos: f64 = ie
            .data()
            .iter()
            .zip(te.data().iter())
            .map(|(a, b)| (*a * *b).to_f64_lossy())
            .sum();
        Ok(100.0 * cos)
    })
}

fn normalized_gram<T: Scalar>(
    img: &Image<T>,
    embedder: &dyn TextImageEmbedder<T>,
) -> Result<Vec<f64>> {
    let pf = embedder.patch_features(&img.to_tensor())?;
    let (p, f) = (pf.shape()[0], pf.shape()[1]);
    let data = pf.to_vec();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(p);
    for i in 0..p {
        let row: Vec<f64> = data[i * f..(i + 1) * f]
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        rows.push(row.into_iter().map(|v| v / norm).collect());
    }
    let mut gram = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..p {
            gram[i * p + j] = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(gram)
}

/// Frobenius distance between the normalized patch-feature Gram matrices of
/// two images. Zero iff the self-similarity structure matches.
pub fn self_similarity_distance<T: Scalar>(
    a: &Image<T>,
    b: &Image<T>,
    embedder: &dyn TextImageEmbedder<T>,
) -> Result<f64> {
    no_grad(|| {
        let ga = normalized_gram(a, embedder)?;
        let gb = normalized_gram(b, embedder)?;
        Ok(ga
            .iter()
            .zip(&gb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt())
    })
}

/// One evaluated case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Cosine to the target caption, times 100.
    pub alignment_score: f64,
    /// Structural distance to the source image.
    pub self_sim_distance: f64,
    pub task_category: TaskCategory,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::{ToyEmbedder, ToyEmbedderConfig};
    use crate::toydata::{all_scenes, render};

    #[test]
    fn alignment_score_mirrors_cosine_extremes() {
        // The embedder guarantees unit norms, so the score is bounded; probe
        // the trivial cosine cases directly on synthetic unit vectors.
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            100.0 * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
        };
        assert_eq!(cos(&[1.0, 0.0], &[1.0, 0.0]), 100.0);
        assert_eq!(cos(&[1.0, 0.0], &[-1.0, 0.0]), -100.0);
        assert_eq!(cos(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        // And the embedder-backed score stays in range.
        let model = ToyEmbedder::<f64>::init(&ToyEmbedderConfig::default(), 1).unwrap();
        let scene = all_scenes()[9];
        let img = render::<f64>(&scene, 2);
        let score = alignment_score(&img, &scene.caption(), &model).unwrap();
        assert!((-100.0..=100.0).contains(&score));
    }
}
