import json
import statistics

import numpy as np
import pytest

from bagdg.adapt import AdaptConfig, adapt
from bagdg.bench import runner
from bagdg.bench.config import COMPONENTS, VARIANTS, RunConfig, TrainConfig, load_config, parse_config
from bagdg.bench.evaluation import classification_metrics, evaluate
from bagdg.bench.runner import CSV_COLUMNS, run_benchmark, run_variant, summarise, write_report
from bagdg.bench.storage import dump_json, load_model, save_model
from bagdg.bench.training import accuracy, erm_probs, matched_hidden_width, run_erm, split_source, train_source
from bagdg.errors import ConfigError, ContractError, NumericalError, StorageError
from bagdg.model import parameter_digest, stage1_probs
from bagdg.scm import LabeledDataset

TINY = dict(epochs=30, n_source=400, n_target=200)


# -- config ------------------------------------------------------------------


def test_full_method_contains_every_ablation():
    full = COMPONENTS["BAG"]
    for v in VARIANTS:
        if v != "BAG":
            assert COMPONENTS[v] < full


def test_variant_switches():
    base = TrainConfig()
    assert base.for_variant("BAG_VAE").lambda0 == 0.0
    re = base.for_variant("BAG_RE")
    assert re.tta_epochs == 0 and re.correction_mode == "none" and re.lambda0 == base.lambda0
    tta = base.for_variant("BAG_TTA")
    assert tta.tta_epochs == base.tta_epochs and "experts" not in COMPONENTS["BAG_TTA"]
    assert base.for_variant("BAG") == base


@pytest.mark.parametrize(
    "bad",
    [dict(lambda0=-1.0), dict(split_fractions=(0.5, 0.6)), dict(variant="IRM"), dict(step_size=0.0), dict(epochs=-1)],
)
def test_train_config_validated(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_unknown_config_keys_rejected():
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config({"epochs": 3, "learning_rate": 0.1})


def test_config_mixes_train_and_generator_fields():
    run = parse_config({"epochs": 3, "content_noise": 0.5})
    assert run.train.epochs == 3
    assert run.scm_for_seed(0).content_noise == 0.5


def test_bad_generator_field_rejected():
    with pytest.raises(ConfigError):
        parse_config({"env_probs": [0.5, 0.6, -0.1]})


def test_load_config_errors(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
    with pytest.raises(StorageError):
        load_config(tmp_path / "missing.json")


# -- training ----------------------------------------------------------------


def test_split_is_disjoint_and_seeded(small_data):
    source = small_data[0]
    a, b = split_source(source, (0.8, 0.2), 1)
    assert a.n + b.n == source.n and a.n == 1200
    a2, _ = split_source(source, (0.8, 0.2), 1)
    assert np.array_equal(a.X, a2.X)


def test_training_is_deterministic(small_cfg, small_data, small_trained):
    again = train_source(small_cfg, small_data[0])
    assert parameter_digest(again.model) == parameter_digest(small_trained.model)
    assert again.loss_trace == small_trained.loss_trace


def test_training_needs_two_environments(small_cfg, small_data):
    source = small_data[0]
    one_env = source.subset(np.nonzero(source.e == 0)[0])
    with pytest.raises(ContractError):
        train_source(small_cfg, one_env)


def test_divergence_aborts(small_data):
    cfg = TrainConfig(epochs=5, step_size=1e160, n_source=1500)
    with pytest.raises(NumericalError, match="epoch"), np.errstate(all="ignore"):
        train_source(cfg, small_data[0])


@pytest.mark.parametrize("seed", range(5))
def test_source_validation_accuracy(default_runs, seed):
    assert default_runs(seed)[3].source_val_acc >= 0.90


def test_matched_capacity():
    h = matched_hidden_width(706, 10, 2)
    assert h == 54
    assert abs((10 * h + h) + (h * 2 + 2) - 706) <= 10 + 1 + 2


@pytest.fixture(scope="module")
def erm_runs(default_runs):
    out = []
    for seed in range(5):
        cfg, source, target, _ = default_runs(seed)
        res = run_erm(cfg, source)
        out.append((res, accuracy(erm_probs(res.model, target.X), target.y)))
    return out


def test_erm_fits_source(erm_runs):
    for res, _ in erm_runs:
        assert res.source_val_acc >= 0.85


def test_erm_target_band(erm_runs):
    accs = [acc for _, acc in erm_runs]
    assert all(0.45 <= a <= 0.65 for a in accs), accs


def test_erm_deterministic(default_runs, erm_runs):
    cfg, source, _, _ = default_runs(0)
    again = run_erm(cfg, source)
    assert again.loss_trace == erm_runs[0][0].loss_trace


# -- evaluation --------------------------------------------------------------


def test_all_correct_scores_one():
    assert classification_metrics([0, 1, 1, 0], [0, 1, 1, 0])["accuracy"] == 1.0


def test_constant_predictor_on_balanced_labels():
    assert classification_metrics([1] * 8, [0, 1] * 4)["accuracy"] == 0.5


def test_hand_counted_fixture():
    pred = [0, 1, 1, 0, 1, 0, 0, 1, 1, 1]
    truth = [0, 1, 0, 0, 1, 1, 0, 1, 0, 1]
    m = classification_metrics(pred, truth, 2)
    # correct: rows 0,1,3,4,6,7,9 -> 7 of 10
    assert m["accuracy"] == 0.7
    assert m["confusion_counts"] == [[3, 1], [2, 4]]
    assert m["per_class_accuracy"] == [0.6, 0.8]


def test_empty_dataset_rejected():
    with pytest.raises(ContractError):
        classification_metrics([], [])


def test_evaluate_stages(small_trained, small_data):
    target = small_data[1]
    pre = evaluate(small_trained.model, target, "pre_tta")
    assert pre["accuracy"] == accuracy(stage1_probs(small_trained.model, target.X), target.y)
    post = evaluate(small_trained.model, target, "post_tta", AdaptConfig(epochs=2))
    assert post["stage"] == "post_tta" and post["n"] == target.n
    with pytest.raises(ContractError):
        evaluate(small_trained.model, target, "mid_tta")


# -- storage -----------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, small_trained, small_data):
    model = small_trained.model
    save_model(tmp_path / "m.json", model, config={"epochs": 120})
    back, meta = load_model(tmp_path / "m.json")
    for name, arr in model.named().items():
        assert np.array_equal(back.named()[name], arr), name
    assert (back.calib.h0, back.calib.h1) == (model.calib.h0, model.calib.h1)
    assert np.array_equal(back.calib.counts, model.calib.counts)
    assert meta == {"config": {"epochs": 120}, "adapted": False}
    X = small_data[1].X
    assert np.array_equal(stage1_probs(back, X), stage1_probs(model, X))


def test_adapted_predictions_survive_reload(tmp_path, small_trained, small_data):
    X = small_data[1].X
    adapted, _ = adapt(small_trained.model, X, AdaptConfig(epochs=2))
    save_model(tmp_path / "a.json", adapted, adapted=True)
    back, meta = load_model(tmp_path / "a.json")
    assert meta["adapted"]
    assert parameter_digest(back) == parameter_digest(adapted)


def test_plain_network_round_trip(tmp_path, small_cfg, small_data):
    net = run_erm(TrainConfig(epochs=3, n_source=1500), small_data[0]).model
    save_model(tmp_path / "e.json", net)
    back, _ = load_model(tmp_path / "e.json")
    assert np.array_equal(erm_probs(back, small_data[1].X), erm_probs(net, small_data[1].X))


def test_truncated_checkpoint_rejected(tmp_path, small_trained):
    path = tmp_path / "m.json"
    save_model(path, small_trained.model)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(StorageError, match="truncated"):
        load_model(path)


def test_version_mismatch_rejected(tmp_path, small_trained):
    path = tmp_path / "m.json"
    save_model(path, small_trained.model)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(StorageError, match="version"):
        load_model(path)


def test_dimension_chain_violation_rejected(tmp_path, small_trained):
    path = tmp_path / "m.json"
    save_model(path, small_trained.model)
    doc = json.loads(path.read_text())
    w = doc["arrays"]["invariant.0.weight"]
    w["shape"], w["data"] = [2, 4], w["data"][:8]
    path.write_text(json.dumps(doc))
    with pytest.raises(StorageError):
        load_model(path)


def test_wrong_data_length_rejected(tmp_path, small_trained):
    path = tmp_path / "m.json"
    save_model(path, small_trained.model)
    doc = json.loads(path.read_text())
    doc["arrays"]["prior"]["data"].append(0.0)
    path.write_text(json.dumps(doc))
    with pytest.raises(StorageError, match="prior"):
        load_model(path)


def test_json_writer_is_exact():
    x = 0.1 + 0.2
    text = dump_json({"a": [x, 1, None], "b": {"c": float("nan")}})
    back = json.loads(text)
    assert back["a"][0] == x and back["b"]["c"] is None


# -- runner ------------------------------------------------------------------


def test_reported_std_is_sample_std():
    accs = [0.91, 0.95, 0.97, 0.93]
    records = [{"variant": "BAG", "seed": s, "source_val_acc": a, "target_pre_acc": a, "target_post_acc": a} for s, a in enumerate(accs)]
    stats = summarise(records, ["BAG"])["BAG"]["target_post_acc"]
    assert abs(stats["std"] - statistics.stdev(accs)) < 1e-12
    assert abs(stats["mean"] - statistics.fmean(accs)) < 1e-12


def test_single_seed_has_no_std():
    rec = [{"variant": "ERM", "seed": 0, "source_val_acc": 1.0, "target_pre_acc": 0.5, "target_post_acc": 0.5}]
    assert summarise(rec, ["ERM"])["ERM"]["target_post_acc"]["std"] is None


def test_variant_record_is_tagged(small_data):
    cfg = TrainConfig(**TINY)
    source, target = small_data
    rec = run_variant("BAG_RE", cfg, source, target)
    assert rec["variant"] == "BAG_RE"
    # nothing to adapt: the post-adaptation score is the stage-one score
    assert rec["target_post_acc"] == rec["target_pre_acc"]
    assert rec["adaptation"]["mode_used"] == "none" and rec["adaptation"]["loss_trace"] == []


def test_skipped_adaptation_keeps_model(small_trained, small_data):
    model = small_trained.model
    adapted, _ = adapt(model, small_data[1].X, AdaptConfig(epochs=0, correction_mode="none"))
    assert parameter_digest(adapted) == parameter_digest(model)


def test_report_files(tmp_path):
    run = RunConfig(TrainConfig(**TINY), {})
    report = run_benchmark(run, [0, 1], ["BAG", "ERM"])
    json_path, csv_path = write_report(report, tmp_path)
    rows = csv_path.read_text().splitlines()
    assert rows[0] == ",".join(CSV_COLUMNS)
    assert len(rows) == 1 + 4
    doc = json.loads(json_path.read_text())
    assert doc["seeds"] == [0, 1] and doc["summary"]["BAG"]["target_post_acc"]["n"] == 2
    assert "wall" not in json_path.read_text()


def test_failed_runs_are_recorded(monkeypatch):
    real = runner.run_variant

    def flaky(variant, cfg, source, target):
        if variant == "BAG" and cfg.seed == 1:
            raise NumericalError("diverged")
        return real(variant, cfg, source, target)

    monkeypatch.setattr(runner, "run_variant", flaky)
    report = run_benchmark(RunConfig(TrainConfig(**TINY), {}), [0, 1], ["BAG"])
    assert report.failures == [{"seed": 1, "variant": "BAG", "error": "diverged"}]
    assert report.summary["BAG"]["target_post_acc"]["n"] == 1


def test_dataset_rejects_ragged_rows():
    with pytest.raises(ContractError):
        LabeledDataset(np.zeros((3, 2)), [0, 1], [0, 0, 0])
