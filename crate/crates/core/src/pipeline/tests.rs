use super::*;
use crate::cdm::ModelKind;
use crate::dataset::{build_q_matrix, split_dataset};
use crate::error::Error;

fn small(seed: u64) -> (DatasetSplit, QMatrix, EmbeddingTables) {
    let spec = SyntheticSpec {
        students: 50,
        exercises: 30,
        concepts: 5,
        logs_per_student: 12,
        ..SyntheticSpec::standard(seed)
    };
    let data = generate_synthetic(&spec).unwrap();
    let split = split_dataset(&data.logs, [0.8, 0.1, 0.1], seed).unwrap();
    let q = build_q_matrix(&split).unwrap();
    let tables = reorder(&data.embeddings, &split);
    (split, q, tables)
}

fn reorder(tables: &EmbeddingTables, split: &DatasetSplit) -> EmbeddingTables {
    let text = crate::alignment::write_embeddings_jsonl(&[&tables.students, &tables.exercises]).unwrap();
    crate::alignment::load_embeddings_jsonl(&text, &split.indices).unwrap()
}

fn quick(kind: ModelKind, align: AlignMode) -> TrainConfig {
    let mut cfg = TrainConfig::new(kind, align, 3);
    cfg.model.ncd_hidden = [16, 8];
    cfg.model.mirt_dim = 4;
    cfg.epochs = 30;
    cfg.batch_size = 64;
    cfg
}

fn small_align() -> AlignmentConfig {
    AlignmentConfig {
        projection_hidden: 16,
        k: 5,
        ..AlignmentConfig::default()
    }
}

#[test]
fn ncd_training_reduces_loss_and_is_deterministic() {
    let (split, q, _) = small(1);
    let cfg = TrainConfig {
        patience: 100,
        ..quick(ModelKind::Ncd, AlignMode::None)
    };
    let a = train(&cfg, &split, &q, None, &AlignmentConfig::default()).unwrap();
    assert_eq!(a.history.len(), 30);
    assert!(a.history.last().unwrap().train_loss < a.history[0].train_loss);
    let b = train(&cfg, &split, &q, None, &AlignmentConfig::default()).unwrap();
    assert_eq!(
        a.checkpoint().unwrap().to_json().unwrap(),
        b.checkpoint().unwrap().to_json().unwrap()
    );
    assert_eq!(a.history, b.history);
}

#[test]
fn no_alignment_ignores_embeddings() {
    let (split, q, tables) = small(2);
    let cfg = quick(ModelKind::Irt, AlignMode::None);
    let a = train(&cfg, &split, &q, None, &small_align()).unwrap();
    let b = train(&cfg, &split, &q, Some(&tables), &small_align()).unwrap();
    assert_eq!(a.model, b.model);
    assert!(b.projections.is_empty());
}

#[test]
fn zero_weights_reduce_to_the_base_objective() {
    let (split, q, tables) = small(2);
    let zero = AlignmentConfig {
        alpha: 0.0,
        beta: 0.0,
        ..small_align()
    };
    let base = train(&quick(ModelKind::Mirt, AlignMode::None), &split, &q, None, &zero).unwrap();
    let aligned = train(
        &quick(ModelKind::Mirt, AlignMode::Beh),
        &split,
        &q,
        Some(&tables),
        &zero,
    )
    .unwrap();
    for (h0, h1) in base.history.iter().zip(&aligned.history) {
        assert!((h0.train_loss - h1.train_loss).abs() < 1e-12);
    }
}

#[test]
fn alignment_modes_train_every_model() {
    let (split, q, tables) = small(4);
    for kind in ModelKind::ALL {
        for align in [AlignMode::Beh, AlignMode::Sem] {
            let cfg = TrainConfig {
                epochs: 2,
                ..quick(kind, align)
            };
            let out = train(&cfg, &split, &q, Some(&tables), &small_align()).unwrap();
            assert!(out
                .projections
                .keys()
                .all(|k| k.starts_with(&format!("align.{}.", align.name()))));
            assert_eq!(out.projections.len(), 8);
            let back = TrainOutcome::from_checkpoint(&out.checkpoint().unwrap()).unwrap();
            assert_eq!(back.model, out.model);
            assert_eq!(back.projections, out.projections);
        }
    }
}

#[test]
fn alignment_without_embeddings_is_config_error() {
    let (split, q, _) = small(5);
    let r = train(&quick(ModelKind::Ncd, AlignMode::Beh), &split, &q, None, &small_align());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn cold_warm_rows() {
    let (split, q, _) = small(6);
    let out = train(
        &quick(ModelKind::Irt, AlignMode::None),
        &split,
        &q,
        None,
        &small_align(),
    )
    .unwrap();
    let freq = FrequencyTable::from_train(&split.train, &split.indices).unwrap();
    let rows = evaluate_cold_warm(&out.model, &split, &q, &freq, 3, 10).unwrap();
    assert_eq!(rows[0].subset, Subset::All);
    assert_eq!(rows[0].n, split.test.len());
    let parts: usize = rows[1..].iter().map(|m| m.n).sum();
    assert!(parts <= split.test.len());
    let none_cold = evaluate_cold_warm(&out.model, &split, &q, &freq, 0, 10).unwrap();
    assert!(none_cold.iter().all(|m| m.subset != Subset::Cold));
}

#[test]
fn sweep_has_one_row_per_cell() {
    let (split, q, _) = small(7);
    let cfg = TrainConfig {
        epochs: 2,
        ..quick(ModelKind::Irt, AlignMode::None)
    };
    let rows = dropout_sweep(&cfg, &split, &q, None, &small_align(), &[0.1, 0.3, 0.5], &[1, 2]).unwrap();
    assert_eq!(rows.len(), 6);
    let csv = sweep_csv(&rows);
    assert!(csv.starts_with("ratio,seed,auc,acc,rmse\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn export_includes_projected_semantics_for_beh() {
    let (split, q, tables) = small(8);
    let cfg = TrainConfig {
        epochs: 1,
        ..quick(ModelKind::Ncd, AlignMode::Beh)
    };
    let out = train(&cfg, &split, &q, Some(&tables), &small_align()).unwrap();
    let rows = export_embeddings(&out, &split, Some(&tables)).unwrap();
    assert_eq!(rows.len(), split.n_students() + split.n_exercises());
    let ex = rows.iter().find(|r| r.kind == EntityKind::Exercise).unwrap();
    assert_eq!(ex.behavioral.len(), split.n_concepts() + 1);
    assert_eq!(ex.semantic_projected.as_ref().unwrap().len(), split.n_concepts() + 1);
}
