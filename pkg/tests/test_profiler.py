import csv
import io
from dataclasses import replace

import pytest

from srupp import profiler as P
from srupp.config import load_config, shipped_configs
from srupp.encoder import EncoderConfig, init_encoder
from srupp.tensor import DimensionError

MATRIX = [
    EncoderConfig(),
    EncoderConfig(bidirectional=True),
    EncoderConfig(normalize=False, output_dim=5),
    EncoderConfig(feat_dim=9, subsample_layers=1, subsample_channels=3, embed_dim=10, attn_dim=4),
    EncoderConfig(feat_dim=15, subsample_layers=3, subsample_channels=2, embed_dim=6, attn_dim=2,
                  num_layers=3),
    EncoderConfig(feat_dim=7, embed_dim=2, attn_dim=1, num_layers=1, subsample_channels=1,
                  normalize=False),
    EncoderConfig(feat_dim=11, embed_dim=12, attn_dim=12, bidirectional=True, output_dim=3),
    EncoderConfig(feat_dim=8, embed_dim=16, attn_dim=4, num_layers=4, subsample_channels=5,
                  dtype="float32"),
    EncoderConfig(feat_dim=20, embed_dim=8, attn_dim=3, bidirectional=True, normalize=False,
                  subsample_channels=4),
    EncoderConfig(feat_dim=10, embed_dim=4, attn_dim=2, num_layers=1, output_dim=9),
    EncoderConfig(feat_dim=8, embed_dim=32, attn_dim=8, num_layers=3, bidirectional=True,
                  subsample_channels=8),
]


@pytest.mark.parametrize("idx", range(len(MATRIX)))
@pytest.mark.parametrize("length", [7, 16, 41])
def test_analytic_flops_equal_instrumented_counts(idx, length):
    cfg = MATRIX[idx]
    if length < cfg.min_len:
        pytest.skip("below minimum length")
    report = P.flops_estimate(cfg, length)
    counted = P.instrumented_flops(cfg, length)
    analytic = {c.name: c.flops for c in report.components if c.flops}
    assert analytic == counted
    assert report.total_flops == sum(counted.values())


@pytest.mark.parametrize("idx", range(len(MATRIX)))
def test_param_counts_equal_actual_arrays(idx):
    cfg = MATRIX[idx]
    report = P.param_count(cfg)
    measured = P.measured_params(init_encoder(cfg, 0))
    assert {c.name: c.params for c in report.components if c.params} == measured
    assert report.total_params == sum(c.params for c in report.components)
    assert report.total_params == sum(a.size for a in init_encoder(cfg, 0).named().values())


def test_hand_counted_minimal_encoder():
    # d=2, d'=1, 1 layer, unidirectional, no normalization, no output linear, one conv channel.
    # conv0: 9 + 1, conv1: 9 + 1, input linear: 2x1 + 2,
    # layer: Wq 2 + Wk 1 + Wv 1 + Wo 6 + alpha 1 + 4 vectors of 2 = 19.
    cfg = EncoderConfig(feat_dim=7, embed_dim=2, attn_dim=1, num_layers=1, subsample_channels=1,
                        normalize=False)
    assert P.param_count(cfg).total_params == 43
    # Same with the default 32 channels: 320 + 9248 + (64 + 2) + 19.
    assert P.param_count(replace(cfg, subsample_channels=32)).total_params == 9653


def test_doubling_layers_doubles_layer_subtotal():
    cfg = EncoderConfig(num_layers=3, bidirectional=True)
    one, two = P.flops_estimate(cfg, 50), P.flops_estimate(replace(cfg, num_layers=6), 50)

    def layer_sum(r, attr):
        return sum(getattr(c, attr) for c in r.components if c.name.startswith("layer"))

    for attr in ("params", "flops"):
        assert layer_sum(two, attr) == 2 * layer_sum(one, attr)
        rest_one = getattr(one, "total_" + attr) - layer_sum(one, attr)
        rest_two = getattr(two, "total_" + attr) - layer_sum(two, attr)
        assert rest_one == rest_two


def test_halving_attention_dim_halves_score_term():
    cfg = EncoderConfig(attn_dim=16)
    full = P.flops_estimate(cfg, 100).get("layer0.attn_scores").flops
    half = P.flops_estimate(replace(cfg, attn_dim=8), 100).get("layer0.attn_scores").flops
    assert full == 2 * half


def test_librispeech_layer_projection_parameters():
    cfg = load_config(shipped_configs()["librispeech"]).encoder_config()
    d, da = 3328, 416
    assert (cfg.embed_dim, cfg.attn_dim) == (d, da)
    report = P.param_count(cfg)
    proj = sum(report.get(f"layer0.{n}").params for n in ("q_proj", "kv_proj", "out_proj"))
    assert proj == da * d + 2 * da * da + 3 * d * da
    assert abs(proj / 1e6 - 5.9) < 0.05


def test_librispeech_calibration_within_band():
    cfg = load_config(shipped_configs()["librispeech"]).encoder_config()
    report = P.flops_estimate(cfg, 1000)
    assert abs(report.total_flops / 1e9 - 62.0) <= 0.2 * 62.0
    assert report.assumptions["num_layers"] == str(cfg.num_layers)
    assert report.assumptions["subsampling"].startswith("4x")


def test_calibration_sweep_finds_shipped_setting():
    cfg = load_config(shipped_configs()["librispeech"]).encoder_config()
    best = P.calibrate(cfg, 1000, 62.0, stages=(cfg.subsample_layers,))[0]
    assert best[:2] == (cfg.num_layers, cfg.subsample_layers)


def test_below_minimum_length_rejected():
    with pytest.raises(DimensionError):
        P.flops_estimate(EncoderConfig(), 6)


def test_renderings():
    report = P.flops_estimate(EncoderConfig(), 40)
    text = report.render_text()
    assert "MAC=2" in text and "assumption: num_layers = 2" in text
    assert text.splitlines()[0].split() == ["component", "params", "flops"]
    rows = list(csv.reader(io.StringIO(report.render_csv())))
    assert rows[0] == ["component", "params", "flops"]
    assert rows[-1] == ["total", str(report.total_params), str(report.total_flops)]
    assert sum(int(r[2]) for r in rows[1:-1]) == report.total_flops
    grouped = report.grouped()
    assert sum(g.flops for g in grouped) == report.total_flops
    assert [g.name for g in grouped][:3] == ["conv0", "conv1", "input_linear"]


def test_unknown_parameter_has_no_component():
    with pytest.raises(KeyError):
        P.param_component("layer.0.mystery")
