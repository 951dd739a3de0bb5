import numpy as np
import pytest

from dfcp_moe.features import (
    ExtractorConfig,
    FeatureSet,
    Standardizer,
    conv_output_dim,
    extract,
    extract_set,
    init_extractor,
    read_features_bin,
    read_features_csv,
    write_features_bin,
    write_features_csv,
)
from dfcp_moe.numeric import DimensionError

# nested-loop conv of a (6,6,1) ramp through seed-7 filters (2 maps, 3x3), flattened (a, q, k)
GOLDEN_CONV = [
    -1.8078774290339323, 1.1512100357915, -1.6738927847241922, 1.1668127463989113,
    -1.539908140414452, 1.1824154570063226, -1.4059234961047118, 1.198018167613734,
    -1.0039695631754915, 1.2448262994359678, -0.8699849188657511, 1.2604290100433786,
    -0.7360002745560114, 1.27603172065079, -0.6020156302462709, 1.2916344312582013,
    -0.20006169731705065, 1.3384425630804349, -0.0660770530073106, 1.354045273687846,
    0.06790759130242968, 1.3696479842952574, 0.20189223561216985, 1.3852506949026684,
    0.6038461685413903, 1.4320588267249021, 0.7378308128511304, 1.4476615373323134,
    0.8718154571608706, 1.4632642479397249, 1.0058001014706106, 1.478866958547136,
]


def test_identity():
    cfg = ExtractorConfig("identity", 3)
    np.testing.assert_array_equal(extract([1.0, 2.0, 3.0], cfg, init_extractor(cfg, (3,))), [1.0, 2.0, 3.0])


def test_identity_wrong_length():
    cfg = ExtractorConfig("identity", 4)
    with pytest.raises(DimensionError):
        extract([1.0, 2.0, 3.0], cfg, init_extractor(cfg, (3,)))


def test_projection_of_zero_image():
    cfg = ExtractorConfig("random-projection", 16, seed=3)
    params = init_extractor(cfg, (5, 5, 1))
    np.testing.assert_array_equal(extract(np.zeros((5, 5, 1)), cfg, params), np.zeros(16))


def test_projection_preserves_norm_on_average():
    cfg = ExtractorConfig("random-projection", 64, seed=0)
    params = init_extractor(cfg, (20,))
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1000, 20))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    sq = np.array([np.sum(extract(u, cfg, params) ** 2) for u in v])
    assert abs(sq.mean() - 1.0) <= 0.2


def test_conv_encoder_golden():
    cfg = ExtractorConfig("conv-encoder", 32, seed=7, conv_filters=(2,), conv_size=3)
    params = init_extractor(cfg, (6, 6, 1))
    x = (np.arange(36, dtype=float).reshape(6, 6, 1) - 17.5) / 10.0
    np.testing.assert_allclose(extract(x, cfg, params), GOLDEN_CONV, rtol=0, atol=1e-12)


def test_conv_encoder_output_dim_has_no_pooling():
    cfg = ExtractorConfig("conv-encoder", 3 * 3 * 5, conv_filters=(4, 5), conv_size=3)
    assert conv_output_dim((7, 7, 2), cfg) == (7 - 3 + 1 - 3 + 1) ** 2 * 5
    params = init_extractor(cfg, (7, 7, 2))
    assert extract(np.ones((7, 7, 2)), cfg, params).shape == (45,)


def test_conv_encoder_dim_mismatch():
    with pytest.raises(DimensionError):
        init_extractor(ExtractorConfig("conv-encoder", 10, conv_filters=(2,)), (6, 6, 1))


def test_config_validation():
    with pytest.raises(ValueError):
        ExtractorConfig("pretrained")
    with pytest.raises(ValueError):
        ExtractorConfig("identity", 0)
    with pytest.raises(ValueError):
        ExtractorConfig("conv-encoder", 4, conv_filters=())


def test_extract_set_single_and_ids():
    cfg = ExtractorConfig("identity", 2)
    fs = extract_set([np.array([1.0, 2.0])], cfg, init_extractor(cfg, (2,)))
    assert len(fs) == 1 and fs.source_ids.tolist() == [0]


def test_identical_samples_identical_vectors():
    cfg = ExtractorConfig("random-projection", 8, seed=1)
    params = init_extractor(cfg, (4,))
    fs = extract_set([np.ones(4), np.ones(4)], cfg, params)
    np.testing.assert_array_equal(fs.values[0], fs.values[1])


def test_threaded_equals_sequential():
    cfg = ExtractorConfig("conv-encoder", 2 * 2 * 3, seed=2, conv_filters=(3,), conv_size=3)
    params = init_extractor(cfg, (4, 4, 1))
    data = np.random.default_rng(0).normal(size=(100, 4, 4, 1))
    a = extract_set(data, cfg, params, threads=1)
    b = extract_set(data, cfg, params, threads=4)
    assert np.array_equal(a.values, b.values)
    assert a.source_ids.tolist() == list(range(100))


def test_extract_set_reports_sample_index():
    cfg = ExtractorConfig("identity", 2)
    with pytest.raises(DimensionError, match="sample 1"):
        extract_set([np.zeros(2), np.zeros(3)], cfg, init_extractor(cfg, (2,)))
    with pytest.raises(ValueError):
        extract_set([], cfg, init_extractor(cfg, (2,)))


def test_featureset_invariants():
    with pytest.raises(ValueError):
        FeatureSet(np.zeros((2, 2)), [0, 0])
    with pytest.raises(ValueError):
        FeatureSet(np.array([[0.0, np.nan]]), [0])


def test_standardizer():
    fs = FeatureSet(np.array([[1.0, 5.0], [3.0, 5.0]]), [0, 1])
    out = Standardizer.fit(fs.values).apply(fs)
    np.testing.assert_allclose(out.values, [[-1.0, 0.0], [1.0, 0.0]])


def test_csv_and_binary_roundtrip(tmp_path):
    fs = FeatureSet(np.random.default_rng(1).normal(size=(4, 3)), [5, 6, 7, 8], [None, 2, None, 0])
    write_features_csv(fs, tmp_path / "f.csv")
    back = read_features_csv(tmp_path / "f.csv")
    assert np.array_equal(back.values, fs.values) and back.labels == fs.labels
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "source_id,label,f0,f1,f2"
    write_features_bin(fs, tmp_path / "f.bin")
    back = read_features_bin(tmp_path / "f.bin")
    assert np.array_equal(back.values, fs.values) and back.labels == fs.labels
    assert back.source_ids.tolist() == [5, 6, 7, 8]
