use super::{Tensor, TensorError};
use crate::real::Real;

/// Token-level categorical cross-entropy: the mean over unmasked rows of
/// `-log softmax(logits)[row, target]`.
pub fn cross_entropy<R: Real>(
    logits: &Tensor<R>,
    targets: &[usize],
    mask: &[bool],
) -> Result<Tensor<R>, TensorError> {
    let (rows, vocab) = match logits.shape() {
        [r, v] => (*r, *v),
        s => {
            return Err(TensorError::Rank {
                op: "cross_entropy",
                expected: 2,
                shape: s.to_vec(),
            })
        }
    };
    if targets.len() != rows || mask.len() != rows {
        return Err(TensorError::Dimension {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len(), mask.len()],
        });
    }
    let mut pick = vec![R::zero(); rows * vocab];
    let mut count = 0usize;
    for (row, (&target, &scored)) in targets.iter().zip(mask).enumerate() {
        if target >= vocab {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: target,
                bound: vocab,
            });
        }
        if scored {
            pick[row * vocab + target] = R::one();
            count += 1;
        }
    }
    if count == 0 {
        return Err(TensorError::Contract(
            "cross_entropy with every position masked".into(),
        ));
    }
    let pick = Tensor::from_vec(pick, &[rows, vocab])?;
    let picked = logits.log_softmax_last().mul(&pick)?.sum();
    Ok(picked.scale(-R::one() / R::of(count as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::<f64>::zeros(&[3, 8]);
        let loss = cross_entropy(&logits, &[1, 2, 3], &[true; 3]).unwrap();
        assert!((loss.item() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let mut data = vec![0.0; 2 * 4];
        data[1] = 1e3;
        data[4 + 3] = 1e3;
        let logits = Tensor::<f64>::from_vec(data, &[2, 4]).unwrap();
        let loss = cross_entropy(&logits, &[1, 3], &[true, true]).unwrap();
        assert!(loss.item().abs() < 1e-9);
    }

    #[test]
    fn masked_rows_are_ignored() {
        let logits = Tensor::<f64>::from_vec(vec![5.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
        let a = cross_entropy(&logits, &[0, 1], &[true, false]).unwrap();
        let b = cross_entropy(&logits, &[0, 0], &[true, false]).unwrap();
        assert_eq!(a.item(), b.item());
    }

    #[test]
    fn out_of_vocab_target_is_an_index_error() {
        let logits = Tensor::<f64>::zeros(&[1, 4]);
        let err = cross_entropy(&logits, &[4], &[true]).unwrap_err();
        assert!(matches!(
            err,
            TensorError::Index {
                index: 4,
                bound: 4,
                ..
            }
        ));
    }
}
