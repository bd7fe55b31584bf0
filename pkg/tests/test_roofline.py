import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnlab.roofline import (
    CtaMode,
    HardwareProfile,
    Resource,
    TileConfig,
    bottleneck_report,
    bwd_roofline,
    fwd_roofline,
    known_profiles,
    load_profile,
    with_overrides,
)

HW = HardwareProfile()
mult = st.integers(1, 4).map(lambda k: 128 * k)


def test_defaults_match_builtin_profile():
    b200 = load_profile("b200-class")
    assert (b200.mma_flops_per_clk, b200.smem_bytes_per_clk, b200.mufu_exp_per_clk) == (8192, 128, 16)
    assert load_profile() == b200


def test_named_profiles():
    assert load_profile("hopper-class").mma_flops_per_clk == 4096
    assert load_profile("b300-class").mufu_exp_per_clk == 32
    assert set(known_profiles()) >= {"b200-class", "hopper-class", "b300-class"}


def test_unknown_profile_lists_known_ones():
    with pytest.raises(KeyError, match="b200-class"):
        load_profile("no-such-gpu")


def test_profile_from_path_and_env(tmp_path, monkeypatch):
    (tmp_path / "tiny.json").write_text(json.dumps({"mma_flops_per_clk": 1024}))
    assert load_profile(str(tmp_path / "tiny.json")).mma_flops_per_clk == 1024
    monkeypatch.setenv("ATTNLAB_PROFILE_DIR", str(tmp_path))
    assert load_profile("tiny").name == "tiny"
    assert "tiny" in known_profiles()
    (tmp_path / "bad.json").write_text(json.dumps({"warp_speed": 9}))
    with pytest.raises(ValueError):
        load_profile(str(tmp_path / "bad.json"))


def test_profile_validation():
    with pytest.raises(ValueError):
        HardwareProfile(smem_bytes_per_clk=0)
    with pytest.raises(ValueError):
        TileConfig(0, 128, 128)


def test_fwd_table():
    c = fwd_roofline(TileConfig(128, 128, 128))
    assert (c.t_mma, c.t_smem_total, c.t_exp) == (1024, 768, 1024)
    c = fwd_roofline(TileConfig(256, 128, 128))
    assert (c.t_mma, c.t_smem_total, c.t_exp) == (2048, 1536, 2048)


def test_fwd_tie_goes_to_mma():
    c = fwd_roofline(TileConfig(128, 128, 128))
    assert c.bottleneck is Resource.MMA
    assert c.tied() == [Resource.MMA, Resource.EXP]


def test_doubled_mufu():
    assert fwd_roofline(TileConfig(128, 128, 128), load_profile("b300-class")).t_exp == 512


def test_bwd_one_cta_table():
    c = bwd_roofline(TileConfig(128, 128, 128))
    assert c.t_mma == 2560
    assert (c.t_smem_mma_operands, c.t_smem_ds_write, c.t_smem_ds_dsmem, c.t_smem_dq) == (2048, 256, 0, 1024)
    assert c.t_smem_total == 3328
    assert c.t_exp == 1024
    assert c.bottleneck is Resource.SMEM
    assert c.excess_over_mma() == 30.0


def test_bwd_two_cta_table():
    c = bwd_roofline(TileConfig(256, 128, 128, cta_mode=CtaMode.TWO_CTA))
    assert c.t_mma == 2560
    assert (c.t_smem_mma_operands, c.t_smem_ds_write, c.t_smem_ds_dsmem, c.t_smem_dq) == (1536, 256, 384, 512)
    assert c.t_smem_total == 2688
    assert c.excess_over_mma() == 5.0


def test_two_cta_needs_even_m():
    with pytest.raises(ValueError):
        bwd_roofline(TileConfig(129, 128, 128, cta_mode=CtaMode.TWO_CTA))


def test_dsmem_factor_is_the_calibrated_knob():
    tile = TileConfig(256, 128, 128, cta_mode=CtaMode.TWO_CTA)
    assert bwd_roofline(tile, with_overrides(HW, dsmem_exchange_factor=1.0)).t_smem_ds_dsmem == 256


@given(mult, mult, mult)
def test_operand_traffic_collapses_at_multiples_of_128(M, N, d):
    c = fwd_roofline(TileConfig(M, N, d))
    assert c.t_smem_mma_operands == 3 * M * N * d / 8192


@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 300))
def test_ceiling_form_bounds_the_smooth_form(M, N, d):
    c = fwd_roofline(TileConfig(M, N, d))
    assert c.t_smem_mma_operands >= 3 * M * N * d / 8192


@given(mult, mult, mult, st.integers(1, 3))
def test_linear_homogeneity(M, N, d, k):
    base = bwd_roofline(TileConfig(M, N, d))
    scaled = bwd_roofline(TileConfig(k * M, N, d))
    assert scaled.t_mma == k * base.t_mma
    assert scaled.t_exp == k * base.t_exp
    assert scaled.t_smem_ds_write == k * base.t_smem_ds_write
    f = fwd_roofline(TileConfig(M, k * N, d))
    assert f.t_mma == k * fwd_roofline(TileConfig(M, N, d)).t_mma


@given(st.sampled_from([32, 64, 128, 256, 512]), st.sampled_from([64, 128, 256]), st.booleans())
def test_bandwidth_monotonicity(bw_lo, bump, two):
    tile = TileConfig(256, 128, 128, cta_mode=CtaMode.TWO_CTA if two else CtaMode.ONE_CTA)
    lo = bwd_roofline(tile, with_overrides(HW, smem_bytes_per_clk=bw_lo))
    hi = bwd_roofline(tile, with_overrides(HW, smem_bytes_per_clk=bw_lo + bump))
    for f in ("t_smem_mma_operands", "t_smem_ds_write", "t_smem_ds_dsmem", "t_smem_dq", "t_smem_total"):
        assert getattr(hi, f) <= getattr(lo, f)


def test_smem_total_is_sum():
    c = bwd_roofline(TileConfig(256, 128, 64, cta_mode=CtaMode.TWO_CTA))
    assert c.t_smem_total == c.t_smem_mma_operands + c.t_smem_ds_write + c.t_smem_ds_dsmem + c.t_smem_dq


def test_bottleneck_report_rows():
    rows = bottleneck_report([TileConfig(128, 128, 128)], HW, "bwd")
    d = rows[0].to_dict()
    assert d["bottleneck"] == "smem" and d["excess_pct"] == 30.0
    with pytest.raises(ValueError):
        bottleneck_report([], HW)


def test_tile_parse():
    t = TileConfig.parse("256x128x64", CtaMode.TWO_CTA)
    assert (t.M, t.N, t.d, t.cta_mode) == (256, 128, 64, CtaMode.TWO_CTA)
    assert t.label() == "256x128x64"
