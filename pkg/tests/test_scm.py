import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bagdg.bench.evaluation import linear_probe_accuracy
from bagdg.errors import ConfigError, ContractError, StorageError
from bagdg.numkit import make_rng
from bagdg.scm import (
    SOURCE,
    TARGET,
    LabeledDataset,
    default_config,
    generate,
    read_dataset,
    sample_bias,
    sample_content,
    sample_environment,
    sample_label,
    write_dataset,
)

N_MC = 100_000


def _noiseless(cfg, **extra):
    return cfg.replace(label_noise=0.0, content_noise=0.0, bias_noise=0.0, obs_noise=0.0, **extra)


# -- sample_environment ------------------------------------------------------


def test_degenerate_categorical_always_first():
    assert np.all(sample_environment([1.0, 0.0, 0.0], make_rng(0), size=1000) == 0)


def test_fair_coin_frequency():
    draws = sample_environment([0.5, 0.5], make_rng(1), size=N_MC)
    assert abs(draws.mean() - 0.5) < 0.01


def test_environment_draws_are_seeded():
    a = sample_environment([0.2, 0.3, 0.5], make_rng(9), size=50)
    b = sample_environment([0.2, 0.3, 0.5], make_rng(9), size=50)
    assert np.array_equal(a, b)


@settings(max_examples=30)
@given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=5), st.integers(0, 1000))
def test_environment_frequencies_follow_probs(raw, seed):
    p = np.array(raw) / sum(raw)
    draws = sample_environment(p, make_rng(seed), size=20_000)
    freq = np.bincount(draws, minlength=p.size) / draws.size
    assert np.all(np.abs(freq - p) < 5 * np.sqrt(p * (1 - p) / 20_000) + 1e-3)


def test_environment_rejects_non_simplex():
    with pytest.raises(ContractError):
        sample_environment([0.5, 0.6], make_rng(0))


# -- sample_label ------------------------------------------------------------


def test_positive_score_without_noise_is_always_one():
    y = sample_label(np.array([5.0]), np.array([1.0]), 0.0, 0.0, make_rng(0), size=100)
    assert np.all(y == 1)


def test_zero_score_with_unit_noise_is_fair():
    y = sample_label(np.zeros(2), np.ones(2), 0.0, 1.0, make_rng(2), size=N_MC)
    assert abs(y.mean() - 0.5) < 0.01


def test_negating_weights_flips_deterministic_label():
    emb, w = np.array([1.0, -0.5]), np.array([0.7, 0.3])
    a = sample_label(emb, w, 0.0, 0.0, make_rng(0))
    b = sample_label(emb, -w, 0.0, 0.0, make_rng(0))
    assert a + b == 1


# -- sample_content ----------------------------------------------------------


def test_content_without_noise_is_anchor():
    c0, c1 = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
    c = sample_content(np.array([0, 1, 1]), c0, c1, 0.0, make_rng(0))
    assert np.array_equal(c, np.stack([c0, c1, c1]))


def test_content_mean_converges_to_anchor():
    c0, c1 = np.array([1.0, 2.0, -3.0]), np.zeros(3)
    sigma = 0.7
    c = sample_content(np.zeros(N_MC, dtype=int), c0, c1, sigma, make_rng(4))
    assert np.all(np.abs(c.mean(axis=0) - c0) < 4 * sigma / np.sqrt(N_MC))


def test_content_distribution_ignores_environment():
    cfg = default_config(0)
    data = generate(cfg, 60_000, SOURCE, 0)
    for label in (0, 1):
        a = data.c[(data.e == 0) & (data.y == label)]
        b = data.c[(data.e == 1) & (data.y == label)]
        se = cfg.content_noise * np.sqrt(1 / len(a) + 1 / len(b))
        assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < 4 * se)


# -- sample_bias -------------------------------------------------------------


def test_bias_without_noise_is_vector_sum():
    cfg = _noiseless(default_config(1))
    b = sample_bias(np.array([0, 2]), np.array([1, 0]), cfg, make_rng(0))
    expect = np.stack([cfg.env_embeddings[0] + cfg.bias_table[0, 1], cfg.env_embeddings[2] + cfg.bias_table[2, 0]])
    assert np.array_equal(b, expect)


def test_changing_environment_shifts_bias_mean():
    cfg = _noiseless(default_config(2))
    b0 = sample_bias(np.array([0]), np.array([1]), cfg, make_rng(0))
    b1 = sample_bias(np.array([1]), np.array([1]), cfg, make_rng(0))
    shift = (cfg.env_embeddings[1] + cfg.bias_table[1, 1]) - (cfg.env_embeddings[0] + cfg.bias_table[0, 1])
    assert np.allclose(b1 - b0, shift, atol=1e-15)


def test_bias_covariance_is_isotropic():
    cfg = default_config(3).replace(bias_noise=0.6)
    b = sample_bias(np.zeros(N_MC, dtype=int), np.ones(N_MC, dtype=int), cfg, make_rng(5))
    cov = np.cov(b, rowvar=False)
    assert np.allclose(cov, 0.36 * np.eye(cfg.n_b), atol=6 * 0.36 * np.sqrt(2 / N_MC))


def test_target_rows_use_target_table():
    cfg = _noiseless(default_config(4))
    b = sample_bias(np.array([cfg.n_envs]), np.array([1]), cfg, make_rng(0))
    assert np.array_equal(b[0], cfg.target_embedding + cfg.target_bias_table[1])


# -- generate ----------------------------------------------------------------


def test_noiseless_single_env_collapses_to_two_points():
    # restricted to one environment's rows
    data = generate(_noiseless(default_config(0)), 500, SOURCE, 0)
    assert len({tuple(row) for row in data.X[data.e == 0]}) <= 2


def test_noiseless_observation_inverts_to_latents():
    cfg = default_config(5).replace(obs_noise=0.0)
    data = generate(cfg, 1000, SOURCE, 5)
    z = np.linalg.solve(cfg.mixing_matrix, data.X.T).T
    assert np.max(np.abs(z - np.hstack([data.c, data.b]))) < 1e-10


def test_generate_is_bit_reproducible():
    cfg = default_config(6)
    a, b = generate(cfg, 300, TARGET, 6), generate(cfg, 300, TARGET, 6)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_target_set_uses_only_target_environment():
    cfg = default_config(0)
    data = generate(cfg, 5000, TARGET, 0)
    assert np.all(data.e == cfg.n_envs)
    assert data.X.shape == (5000, 10)


def test_source_and_target_streams_differ():
    cfg = default_config(0)
    assert not np.array_equal(generate(cfg, 10, SOURCE, 0).X, generate(cfg, 10, TARGET, 0).X)


def test_generate_rejects_bad_arguments():
    cfg = default_config(0)
    with pytest.raises(ContractError):
        generate(cfg, 0, SOURCE, 0)
    with pytest.raises(ContractError):
        generate(cfg, 10, "validation", 0)


def test_content_and_bias_uncorrelated_within_cells():
    cfg = default_config(7)
    data = generate(cfg, 80_000, SOURCE, 7)
    for env in range(cfg.n_envs):
        for label in (0, 1):
            m = (data.e == env) & (data.y == label)
            n = int(m.sum())
            if n < 500:
                continue
            c = data.c[m] - data.c[m].mean(axis=0)
            b = data.b[m] - data.b[m].mean(axis=0)
            assert np.max(np.abs(c.T @ b / n)) < 5 / np.sqrt(n)


# -- default_config ----------------------------------------------------------


def test_default_config_shape_and_validity():
    cfg = default_config(11)
    cfg.validate()
    assert cfg.n_envs == 3 and cfg.n_c == 5 and cfg.n_b == 5 and cfg.n_x == 10
    assert np.allclose(cfg.mixing_matrix @ cfg.mixing_matrix.T, np.eye(10), atol=1e-12)


def test_target_label_shift_points_against_sources():
    cfg = default_config(0)
    pooled = np.tensordot(cfg.env_probs, cfg.bias_table, axes=1)
    src_dir = pooled[1] - pooled[0]
    tgt_dir = cfg.target_bias_table[1] - cfg.target_bias_table[0]
    assert float(src_dir @ tgt_dir) < 0


@pytest.fixture(scope="module")
def probe_sets():
    cfg = default_config(0)
    return generate(cfg, 20_000, SOURCE, 0), generate(cfg, 20_000, TARGET, 0)


def test_bias_probe_fails_on_target(probe_sets):
    src, tgt = probe_sets
    acc = linear_probe_accuracy(src.b, src.y, tgt.b, tgt.y)
    assert acc < 0.5


def test_content_probe_transfers(probe_sets):
    src, tgt = probe_sets
    half = src.n // 2
    on_source = linear_probe_accuracy(src.c[:half], src.y[:half], src.c[half:], src.y[half:])
    on_target = linear_probe_accuracy(src.c[:half], src.y[:half], tgt.c, tgt.y)
    assert abs(on_source - on_target) <= 0.03


# -- ScmConfig validation ----------------------------------------------------


@pytest.mark.parametrize(
    "change",
    [
        dict(env_probs=np.array([0.5, 0.5, 0.1])),
        dict(env_probs=np.array([1.0, 0.0, 0.0])),
        dict(content_noise=-1.0),
        dict(mixing_matrix=np.diag([1.0] * 9 + [1e-9])),
        dict(label_weights=np.zeros(3)),
    ],
)
def test_invalid_configs_rejected(change):
    with pytest.raises(ConfigError):
        default_config(0).replace(**change)


def test_identical_anchors_rejected():
    cfg = default_config(0)
    with pytest.raises(ConfigError):
        cfg.replace(content_anchors=np.stack([cfg.content_anchors[0]] * 2))


def test_unknown_field_rejected():
    with pytest.raises(ConfigError):
        default_config(0).replace(n_layers=3)


# -- dataset files -----------------------------------------------------------


def test_dataset_file_round_trip(tmp_path):
    data = generate(default_config(1), 200, SOURCE, 1)
    path = tmp_path / "d.csv"
    write_dataset(path, data)
    back = read_dataset(path)
    for name in ("X", "y", "e", "c", "b"):
        assert np.array_equal(getattr(back, name), getattr(data, name))
    assert path.read_text().splitlines()[0] == "bagset v1 n=200 nx=10 nc=5 nb=5"


def test_dataset_file_without_latents(tmp_path):
    data = LabeledDataset(np.array([[0.1, 1 / 3]]), [1], [0])
    write_dataset(tmp_path / "d.csv", data)
    back = read_dataset(tmp_path / "d.csv")
    assert back.c is None and np.array_equal(back.X, data.X)


def test_truncated_dataset_file_rejected(tmp_path):
    data = generate(default_config(1), 20, SOURCE, 1)
    path = tmp_path / "d.csv"
    write_dataset(path, data)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-3]) + "\n")
    with pytest.raises(StorageError):
        read_dataset(path)


def test_missing_dataset_file(tmp_path):
    with pytest.raises(StorageError):
        read_dataset(tmp_path / "nope.csv")
