use crate::error::{Error, Result};
use crate::problem::{CostModel, Family, LabeledDataset, WeightVector};

/// Fraction of correctly classified samples.
///
/// Multiclass predictions take the first maximal score. Binary predictions
/// are `+1` for a positive score and `−1` otherwise, so a zero score counts
/// as the lower class.
pub fn evaluate_accuracy(model: &CostModel, w: &WeightVector, data: &LabeledDataset) -> Result<f64> {
    let scores = model.scores(w, data)?;
    let correct = match model.family() {
        Family::LinearRegression => {
            return Err(Error::Unsupported("accuracy of a regression model".into()));
        }
        Family::LogisticMulticlass { classes } => {
            let labels = data.class_labels(classes)?;
            labels
                .iter()
                .enumerate()
                .filter(|&(i, &y)| {
                    let row = scores.row(i);
                    let mut best = 0;
                    for c in 1..classes {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    best == y
                })
                .count()
        }
        Family::LogisticBinary | Family::HingeSvm => {
            let mut correct = 0;
            for (i, &y) in data.labels().iter().enumerate() {
                if y != 1.0 && y != -1.0 {
                    return Err(Error::Argument(format!("binary label {y} is not ±1")));
                }
                let predicted = if scores[(i, 0)] > 0.0 { 1.0 } else { -1.0 };
                if predicted == y {
                    correct += 1;
                }
            }
            correct
        }
    };
    Ok(correct as f64 / data.num_samples() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_multiclass_fixture() {
        let data = LabeledDataset::from_rows(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0]],
            vec![0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        let model = CostModel::new(Family::LogisticMulticlass { classes: 2 }, 2).unwrap();
        // W = I in column-major order
        let w = WeightVector::from_vec(vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(evaluate_accuracy(&model, &w, &data).unwrap(), 1.0);
    }

    #[test]
    fn zero_weights_on_balanced_binary() {
        let data = LabeledDataset::from_rows(
            &[vec![1.0], vec![-1.0], vec![2.0], vec![-2.0]],
            vec![1.0, -1.0, 1.0, -1.0],
        )
        .unwrap();
        let model = CostModel::new(Family::LogisticBinary, 1).unwrap();
        assert_eq!(evaluate_accuracy(&model, &WeightVector::zeros(1), &data).unwrap(), 0.5);
        let multi = CostModel::new(Family::LogisticMulticlass { classes: 2 }, 1).unwrap();
        let labels01 = LabeledDataset::new(data.features().clone(), vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(evaluate_accuracy(&multi, &WeightVector::zeros(2), &labels01).unwrap(), 0.5);
    }

    #[test]
    fn regression_is_unsupported() {
        let data = LabeledDataset::from_rows(&[vec![1.0]], vec![0.3]).unwrap();
        assert!(matches!(
            evaluate_accuracy(&CostModel::linear(1), &WeightVector::zeros(1), &data),
            Err(Error::Unsupported(_))
        ));
    }
}
