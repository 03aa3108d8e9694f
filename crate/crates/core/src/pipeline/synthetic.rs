use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{EmbeddingSource, EmbeddingTable, EmbeddingTables, EntityKind};
use crate::cdm::sigmoid;
use crate::dataset::ResponseLog;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub students: usize,
    pub exercises: usize,
    pub concepts: usize,
    pub logs_per_student: usize,
    /// Standard deviation of the isotropic noise added to embeddings.
    pub noise: f64,
    pub semantic_dim: usize,
    /// Share of exercises that are rarely attempted.
    pub tail_fraction: f64,
    /// Expected number of logs on each rarely attempted exercise.
    pub tail_logs: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 200 students, 100 exercises, 12 concepts, 10 logs per student.
    pub fn standard(seed: u64) -> Self {
        Self {
            students: 200,
            exercises: 100,
            concepts: 12,
            logs_per_student: 10,
            noise: 0.1,
            semantic_dim: 32,
            tail_fraction: 0.7,
            tail_logs: 3.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.students == 0
            || self.exercises == 0
            || self.concepts == 0
            || self.logs_per_student == 0
            || self.semantic_dim == 0
        {
            return Err(Error::config(format!("synthetic counts must be positive: {self:?}")));
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.tail_fraction) || !(self.tail_logs > 0.0) {
            return Err(Error::config(
                "noise must be non-negative, tail fraction in [0, 1) and tail logs positive",
            ));
        }
        Ok(())
    }
}

/// Generating parameters, in dense-id order (`s{i}`, `e{j}`, `k{c}`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub theta: Vec<Vec<f64>>,
    pub discrimination: Vec<f64>,
    pub difficulty: Vec<f64>,
    pub concepts: Vec<Vec<usize>>,
    /// Linear maps from trait and parameter vectors to the semantic space.
    pub student_map: Vec<Vec<f64>>,
    pub exercise_map: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn probability(&self, student: usize, exercise: usize) -> f64 {
        let req = &self.concepts[exercise];
        let mean = req.iter().map(|&c| self.theta[student][c]).sum::<f64>() / req.len() as f64;
        sigmoid(self.discrimination[exercise] * (mean - self.difficulty[exercise]))
    }

    /// Parameter vector that the exercise embedding is built from:
    /// difficulty on each required concept, then discrimination.
    pub fn exercise_vector(&self, exercise: usize, concepts: usize) -> Vec<f64> {
        let mut v = vec![0.0; concepts + 1];
        for &c in &self.concepts[exercise] {
            v[c] = self.difficulty[exercise];
        }
        v[concepts] = self.discrimination[exercise];
        v
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub logs: Vec<ResponseLog>,
    pub embeddings: EmbeddingTables,
    pub truth: GroundTruth,
}

pub fn student_id(i: usize) -> String {
    format!("s{i}")
}

pub fn exercise_id(j: usize) -> String {
    format!("e{j}")
}

pub fn concept_id(c: usize) -> String {
    format!("k{c}")
}

fn random_map(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let sd = (1.0 / cols as f64).sqrt();
    let dist = Normal::new(0.0, sd).expect("positive sd");
    (0..rows)
        .map(|_| (0..cols).map(|_| dist.sample(rng)).collect())
        .collect()
}

fn embed(map: &[Vec<f64>], v: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    map.iter()
        .map(|row| {
            let e: f64 = StandardNormal.sample(rng);
            row.iter().zip(v).map(|(m, x)| m * x).sum::<f64>() + noise * e
        })
        .collect()
}

fn table(kind: EntityKind, ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<EmbeddingTable> {
    EmbeddingTable::new(kind, ids, Tensor::from_rows(&rows)?, EmbeddingSource::Synthetic)
}

/// Sampling weights: head exercises weigh 1, tail exercises are scaled so
/// that each expects `tail_logs` attempts overall.
fn popularity(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<f64> {
    let tail = (spec.exercises as f64 * spec.tail_fraction).round() as usize;
    let head = spec.exercises - tail;
    let total = (spec.students * spec.logs_per_student.min(spec.exercises)) as f64;
    let tail_mass = spec.tail_logs * tail as f64;
    let w = if tail == 0 || head == 0 || tail_mass >= total {
        1.0
    } else {
        spec.tail_logs * head as f64 / (total - tail_mass)
    };
    let mut order: Vec<usize> = (0..spec.exercises).collect();
    order.shuffle(rng);
    let mut weights = vec![1.0; spec.exercises];
    for &j in &order[..tail] {
        weights[j] = w;
    }
    weights
}

/// Draws a 2PL population, response logs with long-tailed exercise
/// popularity, and semantic embeddings that are noisy linear images of
/// the generating parameters. Exercises nobody attempted get no
/// embedding row.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.concepts;

    let theta: Vec<Vec<f64>> = (0..spec.students)
        .map(|_| (0..k).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let discrimination: Vec<f64> = (0..spec.exercises).map(|_| rng.random_range(0.5..=2.0)).collect();
    let difficulty: Vec<f64> = (0..spec.exercises).map(|_| StandardNormal.sample(&mut rng)).collect();
    let all_concepts: Vec<usize> = (0..k).collect();
    let concepts: Vec<Vec<usize>> = (0..spec.exercises)
        .map(|_| {
            let n = rng.random_range(1..=3usize.min(k));
            let mut picked: Vec<usize> = all_concepts.choose_multiple(&mut rng, n).copied().collect();
            picked.sort_unstable();
            picked
        })
        .collect();

    let weights = popularity(spec, &mut rng);

    let truth = GroundTruth {
        theta,
        discrimination,
        difficulty,
        concepts,
        student_map: random_map(spec.semantic_dim, k, &mut rng),
        exercise_map: random_map(spec.semantic_dim, k + 1, &mut rng),
    };

    let per_student = spec.logs_per_student.min(spec.exercises);
    let mut logs = Vec::with_capacity(spec.students * per_student);
    for s in 0..spec.students {
        let picked = rand::seq::index::sample_weighted(&mut rng, spec.exercises, |j| weights[j], per_student)
            .map_err(|e| Error::config(format!("popularity weights: {e}")))?;
        for e in picked {
            let correct = rng.random::<f64>() < truth.probability(s, e);
            let concept_ids: Vec<String> = truth.concepts[e].iter().map(|&c| concept_id(c)).collect();
            logs.push(ResponseLog {
                student_id: student_id(s),
                exercise_id: exercise_id(e),
                content: Some(format!("exercise {e} practising {}", concept_ids.join(" and "))),
                concepts: concept_ids,
                correct,
            });
        }
    }

    let students: Vec<Vec<f64>> = (0..spec.students)
        .map(|s| embed(&truth.student_map, &truth.theta[s], spec.noise, &mut rng))
        .collect();
    let exercises: Vec<Vec<f64>> = (0..spec.exercises)
        .map(|e| embed(&truth.exercise_map, &truth.exercise_vector(e, k), spec.noise, &mut rng))
        .collect();
    let mut seen = vec![false; spec.exercises];
    for log in &logs {
        seen[log.exercise_id[1..].parse::<usize>().expect("generated id")] = true;
    }
    let used: Vec<usize> = (0..spec.exercises).filter(|&e| seen[e]).collect();
    let embeddings = EmbeddingTables {
        students: table(
            EntityKind::Student,
            (0..spec.students).map(student_id).collect(),
            students,
        )?,
        exercises: table(
            EntityKind::Exercise,
            used.iter().map(|&e| exercise_id(e)).collect(),
            used.iter().map(|&e| exercises[e].clone()).collect(),
        )?,
    };
    Ok(SyntheticData {
        logs,
        embeddings,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(students: usize, exercises: usize, concepts: usize, logs: usize) -> SyntheticSpec {
        SyntheticSpec {
            students,
            exercises,
            concepts,
            logs_per_student: logs,
            ..SyntheticSpec::standard(7)
        }
    }

    #[test]
    fn log_count_and_determinism() {
        let s = spec(100, 50, 10, 20);
        let a = generate_synthetic(&s).unwrap();
        assert_eq!(a.logs.len(), 2000);
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.embeddings, b.embeddings);
        for e in &a.truth.concepts {
            assert!((1..=3).contains(&e.len()));
        }
        assert!(a.truth.discrimination.iter().all(|v| (0.5..=2.0).contains(v)));
    }

    #[test]
    fn popularity_is_long_tailed() {
        let data = generate_synthetic(&SyntheticSpec::standard(1)).unwrap();
        let mut counts = vec![0usize; 100];
        for log in &data.logs {
            counts[log.exercise_id[1..].parse::<usize>().unwrap()] += 1;
        }
        let rare = counts.iter().filter(|c| **c <= 6).count();
        assert!((55..=85).contains(&rare), "{counts:?}");
        assert!(counts.iter().filter(|c| **c >= 20).count() >= 25, "{counts:?}");
    }

    #[test]
    fn empirical_rate_tracks_model_probability() {
        let s = SyntheticSpec {
            tail_fraction: 0.0,
            ..spec(1000, 60, 6, 20)
        };
        let data = generate_synthetic(&s).unwrap();
        let mut bins = vec![(0.0, 0.0, 0usize); 10];
        for log in &data.logs {
            let i: usize = log.student_id[1..].parse().unwrap();
            let j: usize = log.exercise_id[1..].parse().unwrap();
            let p = data.truth.probability(i, j);
            let b = ((p * 10.0) as usize).min(9);
            bins[b].0 += p;
            bins[b].1 += log.label();
            bins[b].2 += 1;
        }
        for (p, y, n) in bins {
            if n >= 200 {
                assert!((p / n as f64 - y / n as f64).abs() < 0.03, "{p} {y} {n}");
            }
        }
    }

    #[test]
    fn noiseless_embeddings_are_linear_in_traits() {
        let s = SyntheticSpec {
            noise: 0.0,
            ..spec(40, 10, 4, 3)
        };
        let data = generate_synthetic(&s).unwrap();
        let table = &data.embeddings.students;
        for i in 0..40 {
            let raw = embed(
                &data.truth.student_map,
                &data.truth.theta[i],
                0.0,
                &mut ChaCha8Rng::seed_from_u64(0),
            );
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (a, b) in table.matrix.row(i).iter().zip(&raw) {
                assert!((a - b / norm).abs() < 1e-12);
            }
        }
    }
}
