"""Acceptance suite: one test per exit criterion, each printing a
PASS/FAIL line (run with ``pytest tests/test_acceptance.py -v -s``).

Independent oracles: nearest-of-enumerated-codes for the codec,
materialized argmin over the full candidate grid for the search, central
finite differences for gradients, the Gaussian CDF for sparsity, and
naive layer composition for the pipeline.
"""

import functools
import math
import time

import numpy as np
import pytest

from fpquant import adaround, fpcodec
from fpquant.cli import main as cli_main
from fpquant.fpcodec import (
    bias_from_cmax,
    enumerate_codes,
    make_format,
    max_representable,
    quantize_fp,
)
from fpquant.formatsearch import (
    assign_model,
    bias_candidates,
    fp4_space,
    fp8_space,
    search_tensor,
)
from fpquant.netsim import run_pipeline
from fpquant.synthetic import (
    capture_timesteps,
    make_inputs,
    mini_unet_desc,
    mini_unet_weights,
    weights_as_tensors,
)
from fpquant.tensorstore import (
    QuantManifest,
    QuantRecord,
    Tensor,
    read_container,
    read_manifest,
    write_container,
    write_manifest,
)

ENCODINGS = ((2, 5), (3, 4), (4, 3), (5, 2), (1, 2), (2, 1))


def criterion(n, label):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {n} FAIL - {label}")
                raise
            print(f"ACCEPTANCE {n} PASS - {label}" + (f": {detail}" if detail else ""))

        return wrapper

    return deco


def nearest_code_oracle(codes, x):
    """Nearest code per element; exact ties to the even grid index.
    ``decided`` is False for near-ties within 2**-40 of the local gap."""
    xc = np.clip(np.asarray(x, dtype=np.float64), codes[0], codes[-1])
    idx = np.clip(np.searchsorted(codes, xc), 1, len(codes) - 1)
    lo, hi = codes[idx - 1], codes[idx]
    d_lo, d_hi = xc - lo, hi - xc
    gap = hi - lo
    exact_tie = d_lo == d_hi
    tie_pick_hi = np.mod(np.rint(lo / gap), 2.0) != 0.0
    pick_hi = np.where(exact_tie, tie_pick_hi, d_hi < d_lo)
    nearest = np.where(pick_hi, hi, lo)
    decided = exact_tie | (np.abs(d_lo - d_hi) > 2.0 ** -40 * gap)
    return nearest, decided


@criterion(1, "code-oracle equivalence, 6 encodings x 20 biases x 10k values, exact")
def test_criterion_1_code_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(101)
    checked = 0
    for e, m in ENCODINGS:
        for _ in range(20):
            bias = float(rng.uniform(-4.0, 20.0))
            fmt = make_format(e, m, bias)
            c = max_representable(fmt)
            x = rng.normal(scale=0.6 * c, size=10_000)
            q = quantize_fp(x, fmt)
            codes = enumerate_codes(fmt)
            nearest, decided = nearest_code_oracle(codes, x)
            np.testing.assert_array_equal(q[decided], nearest[decided].astype(np.float32))
            checked += int(decided.sum())
    # exact midpoints resolve ties to the even grid index
    for e, m in ENCODINGS:
        fmt = make_format(e, m)
        codes = enumerate_codes(fmt)
        mids = (codes[:-1] + codes[1:]) / 2.0
        true_mid = (mids - codes[:-1]) == (codes[1:] - mids)
        q = quantize_fp(mids[true_mid], fmt).astype(np.float64)
        lo, hi = codes[:-1][true_mid], codes[1:][true_mid]
        gap = hi - lo
        want = np.where(np.mod(np.rint(lo / gap), 2.0) == 0.0, lo, hi)
        np.testing.assert_array_equal(q, want.astype(np.float32).astype(np.float64))
    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    return f"{checked} decided elements, ties-to-even verified, {elapsed:.1f}s"


@criterion(2, "format sanity: E4M3/E5M2 maxima exact, bias round-trip to 1 ulp")
def test_criterion_2_format_sanity():
    assert max_representable(make_format(4, 3, 8.0)) == 240.0
    assert max_representable(make_format(5, 2, 16.0)) == 57344.0
    rng = np.random.default_rng(202)
    for _ in range(300):
        e = int(rng.integers(1, 6))
        m = int(rng.integers(0, 6))
        b = float(rng.uniform(-4.0, 20.0))
        c = max_representable(make_format(e, m, b))
        c_back = max_representable(make_format(e, m, bias_from_cmax(e, m, c)))
        assert abs(c_back - c) <= np.spacing(c)
    return "240 / 57344 exact; 300 random round-trips within 1 ulp"


@criterion(3, "search equals exhaustive scan on 50 tensors, FP8 and FP4")
def test_criterion_3_search_oracle_equivalence():
    t0 = time.monotonic()
    rng = np.random.default_rng(303)
    for i in range(50):
        size = int(rng.integers(200, 1500))
        data = rng.normal(scale=float(np.exp(rng.uniform(-3, 3))), size=size)
        for space in (fp8_space(), fp4_space()):
            res = search_tensor(data, space)
            mses = []
            for e, m in space.encodings:
                for bias in bias_candidates(data, (e, m), space.n_bias):
                    q = quantize_fp(data, make_format(e, m, bias)).astype(np.float64)
                    mses.append(float(np.mean((q - data) ** 2)))
            assert res.candidate_index == int(np.argmin(mses))
            assert res.mse == min(mses)
    codes = enumerate_codes(make_format(2, 1, 2.0))
    zero_res = search_tensor(codes, fp4_space())
    assert zero_res.mse == 0.0
    elapsed = time.monotonic() - t0
    assert elapsed < 60.0
    return f"50 tensors x (444 + 222) candidates, zero-MSE detected, {elapsed:.1f}s"


@criterion(4, "analytic gradient vs central differences, rel err < 1e-4")
def test_criterion_4_gradient_check():
    rng = np.random.default_rng(404)
    cfg = adaround.LearnConfig()
    cases = [
        ((8, 8), {"op": "linear", "name": "l"}, [rng.normal(size=(6, 8)).astype(np.float32)]),
        (
            (2, 2, 3, 3),
            {"op": "conv2d", "name": "c", "stride": 1, "padding": 1},
            [rng.normal(size=(2, 2, 5, 5)).astype(np.float32)],
        ),
    ]
    eps = 1e-4
    total = 0
    worst = 0.0
    for shape, layer, batch in cases:
        w = rng.normal(size=shape).astype(np.float32)
        st = adaround.init_state(w, make_format(2, 1, 2.0))
        st.alpha = rng.normal(scale=1.5, size=st.alpha.shape)
        _, grad = adaround.loss_and_grad(st, w, batch, layer, cfg)
        c = max_representable(st.fmt)
        raw = st.frozen_scale * (st.frozen_floor + 1.0 / (1.0 + np.exp(-st.alpha)))
        boundary = (np.abs(raw) > c - 1e-6) | (st.clip_mask == 1.0)
        flat, gflat, bflat = st.alpha.ravel(), grad.ravel(), boundary.ravel()
        for i in range(flat.size):
            if bflat[i]:
                continue
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = adaround.loss_and_grad(st, w, batch, layer, cfg)
            flat[i] = orig - eps
            dn, _ = adaround.loss_and_grad(st, w, batch, layer, cfg)
            flat[i] = orig
            fd = (up - dn) / (2 * eps)
            rel = abs(gflat[i] - fd) / max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, rel)
            total += 1
            assert rel < 1e-4
    assert total >= 90  # 100 alpha entries minus clamp-boundary exclusions
    return f"{total} entries checked, worst rel err {worst:.2e}"


@criterion(5, "rounding learning: finalized MSE <= RTN, >=95% gates polarized")
def test_criterion_5_rounding_learning_efficacy():
    t0 = time.monotonic()
    rng = np.random.default_rng(42)
    w = rng.normal(size=(64, 64)).astype(np.float32)
    fmt = search_tensor(w, fp4_space()).format
    factors = rng.normal(size=(64, 8))

    def sample_act(n):
        return (rng.normal(size=(n, 8)) @ factors.T).astype(np.float32)

    from fpquant.tensorstore import CalibSet

    calib = CalibSet()
    for t in range(16):
        for s in range(16):
            calib.add("l.in", t, s, sample_act(1))
    held_out = sample_act(64)

    layer = {"op": "linear", "name": "l"}
    state = adaround.train(adaround.init_state(w, fmt), w, calib, layer, adaround.LearnConfig())
    wq, _ = adaround.finalize(state)

    from fpquant.netsim import linear_forward

    y_ref = linear_forward(w, None, held_out).astype(np.float64)
    mse_learned = float(np.mean((linear_forward(wq, None, held_out) - y_ref) ** 2))
    mse_rtn = float(
        np.mean((linear_forward(quantize_fp(w, fmt), None, held_out) - y_ref) ** 2)
    )
    assert mse_learned <= mse_rtn  # hard
    reduction = 1.0 - mse_learned / mse_rtn
    soft = "met" if reduction >= 0.20 else "NOT met"
    gate = 1.0 / (1.0 + np.exp(-np.clip(state.alpha, -500, 500)))
    polarized = float(np.mean(np.abs(gate - 0.5) > 0.49))
    assert polarized >= 0.95
    elapsed = time.monotonic() - t0
    assert elapsed < 120.0
    return (
        f"format {fmt}, MSE {mse_learned:.4g} vs RTN {mse_rtn:.4g} "
        f"({reduction:.1%} reduction, soft target {soft}), "
        f"{polarized:.1%} polarized, {elapsed:.0f}s"
    )


@criterion(6, "sparsity analog: Gaussian zero mass and FP4 > FP8 > raw")
def test_criterion_6_sparsity():
    rng = np.random.default_rng(606)
    x = rng.normal(size=100_000)
    # E2M1 with bias 2: smallest nonzero code 0.25, zero threshold 0.125
    q = quantize_fp(x, make_format(2, 1, 2.0))
    frac = float(np.mean(q == 0.0))
    expected = math.erf(0.125 / math.sqrt(2.0))
    assert abs(frac - expected) <= 0.01
    raw_sp = float(np.mean(x == 0.0))
    fp4 = search_tensor(x, fp4_space()).format
    fp8 = search_tensor(x, fp8_space()).format
    sp4 = float(np.mean(quantize_fp(x, fp4) == 0.0))
    sp8 = float(np.mean(quantize_fp(x, fp8) == 0.0))
    assert sp4 > sp8 > raw_sp
    return (
        f"zero fraction {frac:.4f} vs analytic {expected:.4f}; "
        f"sparsity fp4 {sp4:.4f} > fp8 {sp8:.5f} > raw {raw_sp:.1f}"
    )


def _integer_tensor(rng, shape, lo, hi):
    return rng.integers(lo, hi, size=shape).astype(np.float32)


@criterion(7, "pipeline exactness on a pre-snapped mini U-Net, MSE = 0 exactly")
def test_criterion_7_pipeline_exactness():
    rng = np.random.default_rng(707)
    desc = mini_unet_desc(with_silu=False)
    weights = {
        "conv1.w": _integer_tensor(rng, (4, 2, 3, 3), -1, 2),
        "conv2.w": _integer_tensor(rng, (4, 4, 3, 3), -1, 2),
        "head.w": _integer_tensor(rng, (2, 8), -1, 2),
    }
    x = _integer_tensor(rng, (1, 2, 4, 4), -2, 3)
    wfp = dict(e_bits=2, m_bits=1, bias=2.0)
    act = dict(e_bits=2, m_bits=5, bias=-3.0)  # integers up to 63 exact
    man = QuantManifest(
        [QuantRecord(n, "weight", "fp", **wfp) for n in weights]
        + [
            QuantRecord(n, "activation", "fp", **act)
            for n in ("conv1.in", "conv2.in", "cat0.skip", "cat0.in")
        ]
    )
    for name, w in weights.items():
        np.testing.assert_array_equal(
            quantize_fp(w, make_format(**wfp)), w, err_msg=f"{name} not pre-snapped"
        )
    rep = run_pipeline(desc, weights, man, x)
    assert rep.per_step_mse == [0.0]
    assert all(s.mse == 0.0 for s in rep.layers)
    np.testing.assert_array_equal(rep.output, rep.reference_output)

    # split-quantization invariant, observed through an identity head
    from fpquant.netsim import forward_capture

    weights_id = dict(weights, **{"head.w": np.eye(8, dtype=np.float32)})
    xf = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
    cap = forward_capture(desc, weights_id, man, xf)
    rep_id = run_pipeline(desc, weights_id, man, xf)
    skip_rec = man.get("cat0.skip")
    skip_fmt = make_format(skip_rec.e_bits, skip_rec.m_bits, skip_rec.bias)
    np.testing.assert_array_equal(rep_id.output[:, :4], quantize_fp(cap["cat0.skip"], skip_fmt))
    return "quantized run identical to full precision; skip half exact"


@criterion(8, "10-step accumulation: monotone without masks, masks no worse")
def test_criterion_8_error_accumulation():
    desc = mini_unet_desc()
    weights = mini_unet_weights(seed=11, gain=1.6)
    inputs = make_inputs(seed=5, n=4)
    init = capture_timesteps(desc, weights, inputs[:2], timesteps=6)
    calib = capture_timesteps(desc, weights, inputs, timesteps=8)
    man = assign_model(weights_as_tensors(weights), init, desc.layers, fp4_space(31), fp8_space(31))
    x = make_inputs(seed=99, n=1)[0]
    plain = run_pipeline(desc, weights, man, x, steps=10)
    assert all(
        a <= b + 1e-12 for a, b in zip(plain.per_step_mse, plain.per_step_mse[1:])
    ), f"per-step MSE not non-decreasing: {plain.per_step_mse}"

    masks = {}
    for layer in desc.layers:
        if layer["op"] not in ("conv2d", "linear"):
            continue
        rec = man.get(layer["w"])
        fmt = make_format(rec.e_bits, rec.m_bits, rec.bias)
        w = weights[layer["w"]]
        st = adaround.train(
            adaround.init_state(w, fmt), w, calib, layer,
            adaround.LearnConfig(iterations=1500, seed=1),
        )
        _, mask = adaround.finalize(st)
        rec.rounding_mask_ref = f"{layer['w']}.mask"
        masks[f"{layer['w']}.mask"] = mask
    masked = run_pipeline(desc, weights, man, x, steps=10, masks=masks)
    assert masked.per_step_mse[-1] <= plain.per_step_mse[-1]
    return (
        f"per-step MSE rises {plain.per_step_mse[0]:.3g} -> {plain.per_step_mse[-1]:.3g}; "
        f"masked final {masked.per_step_mse[-1]:.3g} <= plain {plain.per_step_mse[-1]:.3g}"
    )


@criterion(9, "bit-exact round trips and byte-identical CLI runs under fixed seed")
def test_criterion_9_roundtrips_and_determinism(synth_model, tmp_path):
    rng = np.random.default_rng(909)
    tensors = [
        Tensor("a", rng.normal(size=(7, 3)).astype(np.float32)),
        Tensor("b", np.array([0.0, -0.0, 2.0 ** -149, 1e-40], dtype=np.float32)),
    ]
    p1, p2 = tmp_path / "c1.fpqt", tmp_path / "c2.fpqt"
    write_container(p1, tensors)
    write_container(p2, read_container(p1))
    assert p1.read_bytes() == p2.read_bytes()

    man = QuantManifest(
        [QuantRecord("w", "weight", "fp", e_bits=3, m_bits=4, bias=math.pi)]
    )
    m1, m2 = tmp_path / "m1.json", tmp_path / "m2.json"
    write_manifest(m1, man)
    write_manifest(m2, read_manifest(m1))
    assert m1.read_bytes() == m2.read_bytes()

    outputs = []
    for tag in ("x", "y"):
        d = tmp_path / tag
        d.mkdir()
        q = d / "q.fpqt"
        manp = d / "man.json"
        masks = d / "masks.fpqt"
        man2 = d / "man2.json"
        sim = d / "sim.csv"
        rep = d / "rep.csv"
        assert cli_main(["quantize", synth_model["model"], "-o", str(q), "--e-bits", "4", "--m-bits", "3"]) == 0
        assert cli_main([
            "search", "--model", synth_model["model"], "--acts", synth_model["init"],
            "--pipeline", synth_model["pipeline"], "-o", str(manp),
            "--bitwidth", "4", "--bias-candidates", "31",
        ]) == 0
        assert cli_main([
            "learn-rounding", "--model", synth_model["model"], "--manifest", str(manp),
            "--calib", synth_model["calib"], "--pipeline", synth_model["pipeline"],
            "--masks-out", str(masks), "--manifest-out", str(man2),
            "--iters", "150", "--seed", "5",
        ]) == 0
        assert cli_main([
            "simulate", "--pipeline", synth_model["pipeline"], "--model", synth_model["model"],
            "--manifest", str(man2), "--masks", str(masks),
            "--input", synth_model["input"], "--steps", "2", "-o", str(sim),
        ]) == 0
        assert cli_main([
            "report", "--model", synth_model["model"], "--manifest", str(man2),
            "--masks", str(masks), "-o", str(rep),
        ]) == 0
        outputs.append(tuple(p.read_bytes() for p in (q, manp, masks, man2, sim, rep)))
    assert outputs[0] == outputs[1]
    return "containers/manifests bit-exact; 5 subcommands byte-identical across runs"
