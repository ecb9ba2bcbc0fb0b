import numpy as np
import pytest

from csti.data import WindowedDataset
from csti.errors import (
    ContractViolation,
    DivergenceError,
    MergeIncompatibilityError,
)
from csti.models import build_model
from csti.training import (
    _TAG_FINETUNE,
    _TAG_INIT,
    _TAG_MERGE,
    CstiConfig,
    derive_seed,
    evaluate,
    run_csti,
    run_normal,
    train_local,
    write_trace_csv,
)

from conftest import windowed_market


def _params(model):
    return model.export_params()


# ---------------------------------------------------------------------------
# train_local
# ---------------------------------------------------------------------------

def test_anchor_with_zero_weight_is_bit_identical(small_market):
    train, _, _ = small_market
    model = build_model("dlinear", 16, 1, 3, seed=1)
    plain = train_local(model, train[0], 3, 0.05, 0.9, 32, seed=5)
    anchored = train_local(model, train[0], 3, 0.05, 0.9, 32,
                           anchor=_params(model), prox_weight=0.0, seed=5)
    assert np.array_equal(_params(plain.model).values, _params(anchored.model).values)
    assert plain.epoch_losses == anchored.epoch_losses


def test_huge_prox_weight_pins_params_to_anchor(small_market):
    train, _, _ = small_market
    model = build_model("paifilter", 16, 1, 3, seed=2)
    anchor = _params(model)
    # lambda = 1e6 needs a small step size for the prox term to contract
    result = train_local(model, train[0], 10, 1e-7, 0.9, 64,
                         anchor=anchor, prox_weight=1e6, seed=9)
    drift = np.linalg.norm(_params(result.model).values - anchor.values)
    assert drift < 1e-3
    assert all(p < 1.0 for p in result.prox_penalties)


def test_small_dataset_gives_one_step_per_epoch(small_market):
    train, _, _ = small_market
    ds = train[0]
    tiny = WindowedDataset(ds.stock_id, ds.split, ds.lookback, ds.horizon,
                           ds.inputs[:10], ds.targets[:10], ds.absolute_indices[:10])
    model = build_model("dlinear", 16, 1, 3, seed=3)
    result = train_local(model, tiny, 4, 0.05, 0.9, batch_size=64, seed=1)
    assert result.update_steps == 4


def test_divergence_guard_carries_stock_id(small_market):
    train, _, _ = small_market
    model = build_model("frets", 16, 1, 3, seed=4)
    with pytest.raises(DivergenceError) as err:
        train_local(model, train[1], 50, 50.0, 0.9, 64, seed=2)
    assert err.value.stock_id == train[1].stock_id


# ---------------------------------------------------------------------------
# run_csti
# ---------------------------------------------------------------------------

def test_single_stock_csti_degenerates_to_plain_training(small_market):
    train, _, _ = small_market
    ds = train[0]
    cfg = CstiConfig(stocks=1, merge_rounds=3, finetune_epochs=2,
                     prox_weight=0.0, seed=21, batch_size=32)
    result = run_csti([ds], "dlinear", cfg)

    # replay: merge of one vector is the identity, so the protocol is a
    # sequence of train_local calls with the protocol's own seed schedule
    model = build_model("dlinear", 16, 1, 3,
                        seed=derive_seed(cfg.seed, _TAG_INIT, 0))
    for round_index in (1, 2, 3):
        model = train_local(
            model, ds, 1, cfg.learning_rate, cfg.momentum, cfg.batch_size,
            seed=derive_seed(cfg.seed, _TAG_MERGE, round_index, ds.stock_id),
        ).model
    assert np.array_equal(result.global_params.values, _params(model).values)
    model = train_local(
        model, ds, 2, cfg.learning_rate, cfg.momentum, cfg.batch_size,
        seed=derive_seed(cfg.seed, _TAG_FINETUNE, 0, ds.stock_id),
    ).model
    assert np.array_equal(_params(result.finetuned[0]).values, _params(model).values)


def test_round_one_merge_of_identical_trainings_is_identity(small_market):
    train, _, _ = small_market
    ds = train[0]
    model = build_model("paifilter", 16, 1, 3, seed=31)
    from csti.numerics import axpy_merge

    results = [
        train_local(model, ds, 1, 0.01, 0.9, 64, seed=123) for _ in range(3)
    ]
    vectors = [_params(r.model) for r in results]
    merged = axpy_merge(vectors, [1.0, 1.0, 1.0])
    assert np.array_equal(merged.values, vectors[0].values)


def test_serial_and_parallel_runs_bit_identical(small_market):
    train, _, _ = small_market
    cfg = CstiConfig(stocks=3, merge_rounds=4, finetune_epochs=2, seed=7)
    serial = run_csti(train, "dlinear", cfg, jobs=1)
    threaded = run_csti(train, "dlinear", cfg, jobs=4)
    for a, b in zip(serial.trace.round_globals, threaded.trace.round_globals):
        assert np.array_equal(a.values, b.values)
    for a, b in zip(serial.finetuned, threaded.finetuned):
        assert np.array_equal(_params(a).values, _params(b).values)


def test_stock_permutation_leaves_global_identical(small_market):
    train, _, _ = small_market
    cfg = CstiConfig(stocks=3, merge_rounds=3, finetune_epochs=2, seed=13)
    forward = run_csti(train, "dlinear", cfg)
    backward = run_csti(train[::-1], "dlinear", cfg)
    for a, b in zip(forward.trace.round_globals, backward.trace.round_globals):
        assert np.array_equal(a.values, b.values)
    # per-stock outputs permute with the input order
    for a, b in zip(forward.finetuned, backward.finetuned[::-1]):
        assert np.array_equal(_params(a).values, _params(b).values)


def test_consensus_fixed_point(small_market):
    train, _, _ = small_market
    cfg = CstiConfig(stocks=2, merge_rounds=2, finetune_epochs=0, seed=3)
    init = build_model("dlinear", 16, 1, 3, seed=derive_seed(cfg.seed, _TAG_INIT, 0))
    fixed = []
    for ds in train[:2]:
        targets = init.predict_batch(ds.inputs)  # data gradient is exactly zero
        fixed.append(WindowedDataset(ds.stock_id, ds.split, ds.lookback, ds.horizon,
                                     ds.inputs, targets, ds.absolute_indices))
    result = run_csti(fixed, "dlinear", cfg)
    for round_global in result.trace.round_globals:
        assert np.array_equal(round_global.values, _params(init).values)


def test_budget_parity_on_equal_sized_stocks():
    train, _, _ = windowed_market(5, 300, 0.6, seed=17)
    cfg = CstiConfig(stocks=5, merge_rounds=5, finetune_epochs=5, seed=1)
    csti_result = run_csti(train, "dlinear", cfg)
    normal_result = run_normal(train, "dlinear", epochs_total=10, seed=1)
    # every csti lineage took exactly as many optimizer steps as the
    # normal strategy's single lineage (10 epochs of equal-sized data)
    assert set(csti_result.trace.lineage_update_steps) == set(
        normal_result.trace.lineage_update_steps
    )


def test_proximal_penalty_bounded_by_initial_loss(small_market):
    train, _, _ = small_market
    cfg = CstiConfig(stocks=3, merge_rounds=3, finetune_epochs=5, seed=19)
    result = run_csti(train, "paifilter", cfg)
    first_loss = {}
    for row in result.trace.rows:
        if row.phase == "finetune" and row.stock_id not in first_loss:
            first_loss[row.stock_id] = row.data_loss
    for row in result.trace.rows:
        if row.phase == "finetune":
            assert np.isfinite(row.prox_penalty)
            assert row.prox_penalty <= first_loss[row.stock_id]


def test_mismatched_window_shapes_rejected(small_market):
    train, _, _ = small_market
    other, _, _ = windowed_market(1, 200, 0.5, seed=99, lookback=8)
    odd = other[0]
    renamed = WindowedDataset("OTHER", odd.split, odd.lookback, odd.horizon,
                              odd.inputs, odd.targets, odd.absolute_indices)
    cfg = CstiConfig(stocks=2, merge_rounds=1, finetune_epochs=1)
    with pytest.raises(MergeIncompatibilityError):
        run_csti([train[0], renamed], "dlinear", cfg)


def test_config_validation():
    with pytest.raises(ContractViolation):
        CstiConfig(stocks=0)
    with pytest.raises(ContractViolation):
        CstiConfig(stocks=2, learning_rate=0.0)
    with pytest.raises(ContractViolation):
        CstiConfig(stocks=2, prox_weight=-1.0)
    with pytest.raises(ContractViolation):
        CstiConfig(stocks=2, merge_weights=(1.0,))
    cfg = CstiConfig(stocks=2, merge_rounds=10, finetune_epochs=5,
                     local_epochs_per_round=2)
    assert cfg.epochs_budget == 25


# ---------------------------------------------------------------------------
# run_normal
# ---------------------------------------------------------------------------

def test_normal_single_stock_is_plain_training(small_market):
    train, _, _ = small_market
    result = run_normal(train[:1], "dlinear", epochs_total=4, seed=5)
    assert len(result.snapshots) == 1
    assert len([r for r in result.trace.rows if r.phase == "normal"]) == 4


def test_normal_epoch_split_and_snapshots(small_market):
    train, _, _ = small_market
    result = run_normal(train[:2], "dlinear", epochs_total=10, seed=5)
    assert len(result.snapshots) == 2
    per_stock = {}
    for row in result.trace.rows:
        per_stock[row.stock_id] = per_stock.get(row.stock_id, 0) + 1
    assert set(per_stock.values()) == {5}
    a, b = (_params(s).values for s in result.snapshots)
    assert not np.array_equal(a, b)


def test_normal_requires_enough_epochs(small_market):
    train, _, _ = small_market
    with pytest.raises(ContractViolation):
        run_normal(train, "dlinear", epochs_total=2, seed=5)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

class _OracleModel:
    """Stub that replays stored predictions for its test set."""

    def __init__(self, outputs):
        self.outputs = outputs

    def predict_batch(self, inputs):
        return self.outputs


def test_evaluate_perfect_and_mean_models(small_market):
    _, test, _ = small_market
    ds = test[0]
    perfect = _OracleModel(ds.targets.copy())
    report = evaluate([perfect], [ds])
    ms = report.per_stock[ds.stock_id]
    assert ms.mae == 0.0 and ms.mse == 0.0 and ms.r2 == 1.0

    mean_model = _OracleModel(np.full_like(ds.targets, ds.targets.mean()))
    report = evaluate([mean_model], [ds])
    assert report.per_stock[ds.stock_id].r2 == pytest.approx(0.0, abs=1e-12)


def test_evaluate_macro_average(small_market):
    _, test, _ = small_market
    models = [_OracleModel(ds.targets + 0.01 * (i + 1)) for i, ds in enumerate(test)]
    report = evaluate(models, test)
    expected = np.mean([report.per_stock[ds.stock_id].mse for ds in test])
    assert report.macro["mse"] == pytest.approx(expected)


def test_evaluate_with_denormalizers(small_market):
    _, test, normalizers = small_market
    models = [_OracleModel(ds.targets + 0.05) for ds in test]
    report = evaluate(models, test, normalizers)
    for ds, params in zip(test, normalizers):
        span = params.per_column_max[1] - params.per_column_min[1]
        raw = report.per_stock_denormalized[ds.stock_id]
        assert raw.mae == pytest.approx(0.05 * span, rel=1e-9)


def test_trace_csv_export(tmp_path, small_market):
    train, _, _ = small_market
    cfg = CstiConfig(stocks=3, merge_rounds=2, finetune_epochs=2, seed=23)
    result = run_csti(train, "dlinear", cfg)
    path = tmp_path / "trace.csv"
    write_trace_csv(result.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "phase,round,stock_id,data_loss,proximal_penalty,wall_ms"
    assert any(line.startswith("merge,1,global,") for line in lines)
    assert any(line.startswith("finetune,2,SYN00") for line in lines)
