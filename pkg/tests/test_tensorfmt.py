import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldflow.tensorfmt import (
    ChannelVocabulary, FormatError, PatchSize, TokenPlan, apply_norm, canonicalize, fit_norm,
    invert_norm, patchify, plan_for_field, resample, unpatchify, window_stats,
)

CFD3 = ["Vx", "Vy", "Vz", "rho", "p"]


def test_vocabulary_defaults():
    v = ChannelVocabulary()
    assert v.c_max == 9
    assert v.names[:5] == tuple(CFD3)
    with pytest.raises(FormatError):
        ChannelVocabulary(("a", "a"))
    with pytest.raises(FormatError):
        v.slot("temperature")


def test_canonicalize_3d_identity_case():
    raw = np.random.default_rng(0).standard_normal((4, 8, 8, 8, 5)).astype(np.float32)
    f = canonicalize(raw, CFD3, 3)
    assert f.shape == (4, 8, 8, 8, 9)
    np.testing.assert_array_equal(f.data[..., :5], raw)
    assert f.mask.tolist() == [1, 1, 1, 1, 1, 0, 0, 0, 0]
    assert not f.data[..., 5:].any()


def test_canonicalize_1d_cfd_shape():
    raw = np.ones((10, 1024, 3))
    f = canonicalize(raw, ["Vx", "rho", "p"], 1)
    assert f.shape == (10, 1024, 8, 8, 9)
    assert f.mask.sum() == 3
    # padding beyond the native line stays zero
    assert not f.data[:, :, 1:].any() and not f.data[:, :, :, 1:].any()


def test_canonicalize_roundtrip_and_errors():
    rng = np.random.default_rng(1)
    raw = rng.standard_normal((3, 13, 6, 2))  # 2D, non-divisible present axes
    f = canonicalize(raw, ["rho", "Vy"], 2)
    assert f.shape == (4, 16, 8, 8, 9)
    np.testing.assert_array_equal(f.to_native(["rho", "Vy"]), raw)
    with pytest.raises(FormatError):
        canonicalize(raw, ["rho", "Vy"], 1)
    with pytest.raises(FormatError):
        canonicalize(raw, ["rho", "enthalpy"], 2)


def test_canonicalize_variable_order_independent():
    rng = np.random.default_rng(2)
    raw = rng.standard_normal((2, 8, 4))
    names = ["Vx", "rho", "p", "u_act"]
    perm = [2, 0, 3, 1]
    a = canonicalize(raw, names, 1)
    b = canonicalize(raw[..., perm], [names[i] for i in perm], 1)
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.mask, b.mask)


def test_patchify_counts():
    f = canonicalize(np.zeros((10, 1024, 3)), ["Vx", "rho", "p"], 1)
    tok = patchify(f)
    assert tok.vectors.shape == (5 * 128, 2 * 8 * 8 * 8 * 9) == (640, 9216)
    whole = patchify(f, PatchSize(10, 1024, 8, 8))
    assert whole.vectors.shape[0] == 1


@pytest.mark.parametrize("names,dim,patch,V", [
    (["Vx", "rho", "p"], 1, (2, 8, 1, 1), 48),
    (["Vx", "Vy", "rho", "p"], 2, (2, 8, 8, 1), 512),
    (CFD3, 3, (2, 8, 8, 8), 5120),
])
def test_native_patch_vector_sizes(names, dim, patch, V):
    P = PatchSize(2, 8, 8, 8)
    assert P.native(dim).as_tuple() == patch
    assert P.native(dim).token_dim(len(names)) == V


def test_patchify_scan_order():
    # one token; channel is the fastest index, then d, w, h, t
    data = np.arange(2 * 2 * 2 * 2 * 3, dtype=float).reshape(2, 2, 2, 2, 3)
    f = canonicalize(data[..., :3], ["Vx", "Vy", "Vz"], 3, ChannelVocabulary(("Vx", "Vy", "Vz")),
                     PatchSize(2, 2, 2, 2))
    np.testing.assert_array_equal(patchify(f).vectors[0], data.ravel())


def test_unpatchify_roundtrip_permuted_and_single():
    rng = np.random.default_rng(3)
    f = canonicalize(rng.standard_normal((4, 16, 8, 2)), ["Vx", "p"], 2)
    tok = patchify(f)
    g = unpatchify(tok, f.mask, 2, f.native_shape)
    np.testing.assert_array_equal(g.data, f.data)
    perm = rng.permutation(len(tok.vectors))
    tok.vectors, tok.coords = tok.vectors[perm], tok.coords[perm]
    np.testing.assert_array_equal(unpatchify(tok, f.mask, 2, f.native_shape).data, f.data)

    one = patchify(f, PatchSize(4, 16, 8, 8))
    assert one.coords.tolist() == [[0, 0, 0, 0]]
    np.testing.assert_array_equal(unpatchify(one, f.mask, 2, f.native_shape).data, f.data)


def test_unpatchify_rejects_bad_coords():
    f = canonicalize(np.zeros((2, 16, 1)), ["Vx"], 1)
    tok = patchify(f)
    tok.coords = tok.coords.copy()
    tok.coords[1] = tok.coords[0]
    with pytest.raises(FormatError):
        unpatchify(tok, f.mask, 1, f.native_shape)
    tok = patchify(f)
    tok.coords = tok.coords[:1]
    tok.vectors = tok.vectors[:1]
    with pytest.raises(FormatError):
        unpatchify(tok, f.mask, 1, f.native_shape)


@settings(max_examples=40, deadline=None)
@given(
    dim=st.integers(1, 3),
    t=st.integers(1, 5), x=st.integers(1, 9), y=st.integers(1, 9), z=st.integers(1, 9),
    pt=st.integers(1, 3), ph=st.integers(1, 4), pw=st.integers(1, 4), pd=st.integers(1, 4),
    nvar=st.integers(1, 4), seed=st.integers(0, 1000),
)
def test_property_counts_bijection_nullity(dim, t, x, y, z, pt, ph, pw, pd, nvar, seed):
    rng = np.random.default_rng(seed)
    spatial = (x, y, z)[:dim]
    names = list(rng.choice(ChannelVocabulary().names, size=nvar, replace=False))
    patch = PatchSize(pt, ph, pw, pd)
    raw = rng.standard_normal((t,) + spatial + (nvar,)).astype(np.float32)
    f = canonicalize(raw, names, dim, patch=patch)
    ext = f.shape[:4]
    assert all(e % p == 0 for e, p in zip(ext, patch.as_tuple()))
    assert not f.data[..., f.mask == 0].any()
    tok = patchify(f)
    grid = [e // p for e, p in zip(ext, patch.as_tuple())]
    assert tok.vectors.shape == (int(np.prod(grid)), pt * ph * pw * pd * 9)
    np.testing.assert_array_equal(unpatchify(tok, f.mask, dim, f.native_shape).data, f.data)
    np.testing.assert_array_equal(f.to_native(names), raw)

    # the compact plan is an exact column subset of the full layout
    plan = plan_for_field(f)  # channels in vocabulary order
    order = np.argsort(ChannelVocabulary().slots(names), kind="stable")
    raw6 = raw[..., order].reshape((t,) + spatial + (1,) * (3 - dim) + (nvar,))
    compact = plan.tokens(raw6)
    np.testing.assert_array_equal(compact, tok.vectors[:, plan.columns])
    np.testing.assert_array_equal(plan.untokens(compact), raw6)


def test_token_plan_torch_and_validity():
    plan = TokenPlan(["Vx"], 1, (12, 1, 1), 3)
    assert plan.grid == (2, 2, 1, 1)
    raw = torch.randn(2, 3, 12, 1, 1, 1)
    tok = plan.tokens(raw)
    assert tok.shape == (2, 4, 16)
    torch.testing.assert_close(plan.untokens(tok), raw, rtol=0, atol=0)
    v = plan.validity
    assert v.shape == (4, 16) and v.sum() == 3 * 12
    with pytest.raises(FormatError):
        TokenPlan(["Vx"], 1, (12, 2, 1), 3)


def test_fit_norm_examples():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((10, 64))
    x = (x - x.mean()) / x.std() * 2 + 3
    f = canonicalize(x[..., None], ["rho"], 1)
    stats = fit_norm(f)
    slot = ChannelVocabulary().slot("rho")
    assert stats.mean[slot] == pytest.approx(3, abs=1e-9)
    assert stats.scale[slot] == pytest.approx(2, abs=1e-9)
    # masked channels keep (0, 1)
    assert stats.mean[0] == 0 and stats.scale[0] == 1
    n = apply_norm(f, stats)
    vals = n.to_native(["rho"])
    assert abs(vals.mean()) < 1e-6 and abs(np.sqrt((vals ** 2).mean()) - 1) < 1e-6
    assert not n.data[..., 0].any()
    back = invert_norm(n, stats)
    np.testing.assert_allclose(back.data, f.data, rtol=1e-6, atol=1e-12)

    z = canonicalize(((x - 3) / 2)[..., None], ["rho"], 1)
    s2 = fit_norm(z)
    assert s2.mean[slot] == pytest.approx(0, abs=1e-9) and s2.scale[slot] == pytest.approx(1, abs=1e-9)


def test_window_stats_constant_channel_floor():
    h = np.zeros((2, 10, 16, 1, 1, 2))
    h[..., 1] = 5.0
    mean, scale = window_stats(h)
    assert mean.shape == (2, 1, 1, 1, 1, 2)
    assert np.all(scale == 1e-6)
    assert np.allclose(mean[..., 1], 5.0)


def test_resample_examples():
    traj = np.random.default_rng(5).standard_normal((3, 17, 2))
    np.testing.assert_array_equal(resample(traj, (17,)), traj)

    ramp = np.linspace(0, 1, 8)[None, :, None]
    up = resample(ramp, (16,))
    np.testing.assert_allclose(up[0, :, 0], np.linspace(0, 1, 16), atol=1e-12)
    assert up[0, 0, 0] == 0 and up[0, -1, 0] == 1

    xs = np.linspace(0, 1, 256)
    s = np.sin(2 * np.pi * xs)[None, :, None]
    down = resample(s, (128,))
    assert np.abs(down[0, :, 0] - np.sin(2 * np.pi * np.linspace(0, 1, 128))).max() < 1e-3

    with pytest.raises(FormatError):
        resample(traj, (0,))


def test_resample_periodic_mode():
    n, m = 128, 64
    x = np.arange(n) / n
    s = np.sin(2 * np.pi * x)[None, :, None]
    d = resample(s, (m,), periodic=True)
    np.testing.assert_allclose(d[0, :, 0], np.sin(2 * np.pi * np.arange(m) / m), atol=1e-12)
    u = resample(s, (256,), periodic=True)
    assert np.abs(u[0, :, 0] - np.sin(2 * np.pi * np.arange(256) / 256)).max() < 1e-3
