//! Student proficiency, question difficulty and question discrimination
//! tables, and the interaction that turns a response into the knowledge
//! base input:
//!
//! `x = q ∘ (σ(proficiency[s]) − σ(difficulty[q])) · σ(discrimination[q])`
//!
//! where `q` is the question's Q-matrix row. Untested skills are exactly 0.

use rand::Rng;

use crate::autodiff::{Graph, Mode, NodeId, ValueMap};
use crate::data::{QMatrix, ResponseRecord};
use crate::error::{Error, Result};
use crate::knowledge_base::xavier_uniform;
use crate::tensor::Tensor;

pub const STUDENT: &str = "emb.student";
pub const DIFFICULTY: &str = "emb.difficulty";
pub const DISCRIMINATION: &str = "emb.discrimination";

/// Xavier-initialised tables: `A × d`, `B × d`, `B × 1`.
pub fn init_tables(
    num_students: usize,
    num_questions: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> ValueMap {
    let mut m = ValueMap::new();
    m.insert(STUDENT.into(), xavier_uniform(num_students, dim, rng));
    m.insert(DIFFICULTY.into(), xavier_uniform(num_questions, dim, rng));
    m.insert(DISCRIMINATION.into(), xavier_uniform(num_questions, 1, rng));
    m
}

/// Records the encoder for a batch of records; the result is `[batch, d]`.
pub fn encode_batch(
    g: &mut Graph,
    qmatrix: &QMatrix,
    records: &[&ResponseRecord],
) -> Result<NodeId> {
    let d = qmatrix.num_skills();
    let mut mask = Vec::with_capacity(records.len() * d);
    for r in records {
        if r.question >= qmatrix.num_questions() {
            return Err(Error::invalid(format!(
                "question {} outside the Q-matrix",
                r.question
            )));
        }
        let row = qmatrix.row_f64(r.question);
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::EmptyQRow(r.question));
        }
        mask.extend(row);
    }
    let students: Vec<usize> = records.iter().map(|r| r.student).collect();
    let questions: Vec<usize> = records.iter().map(|r| r.question).collect();

    let stu = g.param(STUDENT);
    let diff = g.param(DIFFICULTY);
    let disc = g.param(DISCRIMINATION);
    let stu = g.gather(stu, students);
    let diff = g.gather(diff, questions.clone());
    let disc = g.gather(disc, questions);
    let stu = g.sigmoid(stu);
    let diff = g.sigmoid(diff);
    let gate = g.sigmoid(disc);
    let gap = g.sub(stu, diff);
    let scaled = g.mul_col(gap, gate);
    let mask = g.constant(Tensor::from_vec(records.len(), d, mask));
    Ok(g.mul(scaled, mask))
}

/// Encodes a single record with the given tables.
pub fn encode(tables: &ValueMap, qmatrix: &QMatrix, record: &ResponseRecord) -> Result<Vec<f64>> {
    let mut g = Graph::new(Mode::Eval);
    encode_batch(&mut g, qmatrix, &[record])?;
    let out = g.forward(&[tables])?;
    Ok(g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;
    use proptest::prelude::*;

    fn tables(stu: Vec<f64>, diff: Vec<f64>, disc: f64) -> ValueMap {
        let d = stu.len();
        let mut m = ValueMap::new();
        m.insert(STUDENT.into(), Tensor::from_vec(1, d, stu));
        m.insert(DIFFICULTY.into(), Tensor::from_vec(1, d, diff));
        m.insert(DISCRIMINATION.into(), Tensor::scalar(disc));
        m
    }

    fn record(skills: Vec<usize>) -> ResponseRecord {
        ResponseRecord {
            student: 0,
            question: 0,
            skills,
            score: 1,
        }
    }

    #[test]
    fn equal_rows_give_zero() {
        let q = QMatrix::from_skill_lists(3, &[vec![0, 1, 2]]).unwrap();
        let t = tables(vec![0.3, -1.0, 2.0], vec![0.3, -1.0, 2.0], 0.7);
        assert!(encode(&t, &q, &record(vec![0, 1, 2]))
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn single_skill_mask() {
        let q = QMatrix::from_skill_lists(3, &[vec![1]]).unwrap();
        let t = tables(vec![1.0, 2.0, 3.0], vec![-1.0, -2.0, -3.0], 0.0);
        let x = encode(&t, &q, &record(vec![1])).unwrap();
        assert_eq!(x[0], 0.0);
        assert_eq!(x[2], 0.0);
        assert!(x[1] != 0.0);
    }

    #[test]
    fn hand_evaluated_fixture() {
        // 0.5 * (0.5 - σ(∓2)), σ(-2) = 0.11920292202211755
        let q = QMatrix::from_skill_lists(2, &[vec![0, 1]]).unwrap();
        let t = tables(vec![0.0, 0.0], vec![-2.0, 2.0], 0.0);
        let x = encode(&t, &q, &record(vec![0, 1])).unwrap();
        let s = 0.11920292202211755;
        assert!((x[0] - 0.5 * (0.5 - s)).abs() < 1e-15);
        assert!((x[1] - 0.5 * (0.5 - (1.0 - s))).abs() < 1e-15);
        assert!((x[0] - 0.1904).abs() < 1e-4 && (x[1] + 0.1904).abs() < 1e-4);
    }

    #[test]
    fn gradients_touch_only_the_records_rows() {
        let mut rng = rand::thread_rng();
        let t = init_tables(4, 5, 3, &mut rng);
        let q = QMatrix::from_skill_lists(3, &vec![vec![0, 2]; 5]).unwrap();
        let r = ResponseRecord {
            student: 2,
            question: 3,
            skills: vec![0, 2],
            score: 1,
        };
        let mut g = Graph::new(Mode::Eval);
        let x = encode_batch(&mut g, &q, &[&r]).unwrap();
        g.sum(x);
        let out = g.forward(&[&t]).unwrap();
        let grads = g.backward_scalar(out).unwrap();
        for (name, row) in [(STUDENT, 2), (DIFFICULTY, 3), (DISCRIMINATION, 3)] {
            let gt = &grads[name];
            for i in 0..gt.rows() {
                let touched = gt.row_slice(i).iter().any(|&v| v != 0.0);
                assert_eq!(touched, i == row, "{name} row {i}");
            }
        }
    }

    proptest! {
        #[test]
        fn bounded_and_mask_invariant(
            stu in proptest::collection::vec(-6.0f64..6.0, 4),
            diff in proptest::collection::vec(-6.0f64..6.0, 4),
            disc in -6.0f64..6.0,
            bump in -5.0f64..5.0,
        ) {
            let q = QMatrix::from_skill_lists(4, &[vec![0, 2]]).unwrap();
            let r = record(vec![0, 2]);
            let x = encode(&tables(stu.clone(), diff.clone(), disc), &q, &r).unwrap();
            for (k, v) in x.iter().enumerate() {
                prop_assert!(v.abs() < 1.0);
                let expected = if k == 0 || k == 2 {
                    sigmoid(disc) * (sigmoid(stu[k]) - sigmoid(diff[k]))
                } else { 0.0 };
                prop_assert!((v - expected).abs() < 1e-12);
            }
            // skill 1 and 3 are outside the row's support
            let mut stu2 = stu.clone();
            stu2[1] += bump;
            let mut diff2 = diff.clone();
            diff2[3] -= bump;
            let y = encode(&tables(stu2, diff2, disc), &q, &r).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
