"""Command-line interface.

Subcommands: inspect, quantize, search, learn-rounding, simulate, report.
Exit codes: 0 success, 1 usage error, 2 I/O error, 3 validation error.
Machine-readable outputs (containers, manifests, CSV) are written
atomically and are byte-identical across runs with the same inputs and
seed.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import adaround, fpcodec, formatsearch, netsim
from .tensorstore import (
    CalibSet,
    ContainerError,
    ManifestError,
    QuantManifest,
    QuantRecord,
    Tensor,
    read_container,
    read_manifest,
    sparsity,
    sqnr_db,
    mse,
    validate_masks,
    write_container,
    write_manifest,
)

CSV_HEADER = "layer_name,mse,sqnr_db,sparsity,format,bias"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf"
    if math.isnan(x):
        return "nan"
    return format(x, ".12g")


def _write_text_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_weights(path: str) -> dict[str, np.ndarray]:
    return {t.name: t.data for t in read_container(path)}


def _record_format(rec: QuantRecord | None) -> tuple[str, str]:
    if rec is None or rec.mode == "passthrough":
        return "", ""
    if rec.mode == "int":
        return f"INT{rec.bits}", ""
    return f"E{rec.e_bits}M{rec.m_bits}", _fmt(rec.bias)


# ---------------------------------------------------------------------------
# subcommands


def cmd_inspect(args) -> int:
    tensors = read_container(args.container)
    print(f"container: {args.container}")
    print(f"tensors: {len(tensors)}")
    for t in tensors:
        d = t.data
        shape = "x".join(str(s) for s in d.shape)
        print(
            f"  {t.name}  shape={shape}  min={_fmt(float(d.min()) if d.size else 0.0)}"
            f"  max={_fmt(float(d.max()) if d.size else 0.0)}  sparsity={_fmt(sparsity(d))}"
        )
    return 0


def cmd_quantize(args) -> int:
    tensors = read_container(args.container)
    out = []
    if args.int:
        cfg = fpcodec.IntQuantConfig(args.bitwidth)
        print(f"quantize: int mode, bits={args.bitwidth}")
        for t in tensors:
            out.append(Tensor(t.name, fpcodec.quantize_int(t.data, cfg)))
    else:
        if args.e_bits is None or args.m_bits is None:
            raise ValueError("fp quantization needs --e-bits and --m-bits (or use --int)")
        fmt = fpcodec.make_format(args.e_bits, args.m_bits, args.bias)
        print(f"quantize: fp mode, format={fmt}")
        for t in tensors:
            out.append(Tensor(t.name, fpcodec.quantize_fp(t.data, fmt)))
    write_container(args.output, out)
    print(f"wrote {len(out)} tensors to {args.output}")
    return 0


def _propagated_assign(
    weights: dict[str, np.ndarray],
    init_acts: CalibSet,
    desc: netsim.PipelineDesc,
    space_w: formatsearch.SearchSpace,
    space_a: formatsearch.SearchSpace,
) -> QuantManifest:
    """Greedy assignment that re-captures activations through the partially
    quantized pipeline before searching each activation record."""
    first_quant = next(l for l in desc.layers if l["op"] in ("conv2d", "linear"))
    input_keys = sorted(
        k for k in init_acts.entries if k[0] == f"{first_quant['name']}.in"
    )
    if not input_keys:
        raise ValueError("initialization set lacks captures for the first layer input")
    inputs = [init_acts.entries[k] for k in input_keys]

    records: list[QuantRecord] = []

    def current_captures() -> dict[str, list[np.ndarray]]:
        partial = QuantManifest(list(records))
        pools: dict[str, list[np.ndarray]] = {}
        for x in inputs:
            cap = netsim.forward_capture(desc, weights, partial, x)
            for name, val in cap.items():
                pools.setdefault(name, []).append(val.ravel())
        return pools

    def act_record(name: str) -> QuantRecord:
        pools = current_captures()
        if name not in pools:
            raise KeyError(f"activation {name!r} not reachable in pipeline")
        res = formatsearch.search_tensor(np.concatenate(pools[name]), space_a)
        return QuantRecord(
            name, "activation", "fp",
            e_bits=res.format.e_bits, m_bits=res.format.m_bits, bias=res.format.bias,
        )

    prev_op = None
    for layer in desc.layers:
        op = layer["op"]
        if op in ("conv2d", "linear"):
            res = formatsearch.search_tensor(weights[layer["w"]], space_w)
            records.append(
                QuantRecord(
                    layer["w"], "weight", "fp",
                    e_bits=res.format.e_bits, m_bits=res.format.m_bits, bias=res.format.bias,
                )
            )
            if prev_op != "skip_concat":
                records.append(act_record(f"{layer['name']}.in"))
        elif op == "skip_concat":
            records.append(act_record(f"{layer['name']}.skip"))
            records.append(act_record(f"{layer['name']}.in"))
        elif op == "groupnorm":
            for key in ("gamma", "beta"):
                if layer.get(key):
                    records.append(QuantRecord(layer[key], "weight", "passthrough"))
        if op != "skip_save":
            prev_op = op
    return QuantManifest(records)


def cmd_search(args) -> int:
    if not args.int and not args.acts:
        raise _UsageError("search requires --acts unless --int is given")
    weights_list = read_container(args.model)
    weights = {t.name: t.data for t in weights_list}
    desc = netsim.PipelineDesc.load(args.pipeline)
    if args.int:
        records = []
        for layer in desc.layers:
            if layer["op"] in ("conv2d", "linear"):
                records.append(QuantRecord(layer["w"], "weight", "int", bits=args.bitwidth))
                records.append(
                    QuantRecord(f"{layer['name']}.in", "activation", "int", bits=args.act_bitwidth)
                )
        manifest = QuantManifest(records)
        print(f"search: int baseline, weight bits={args.bitwidth}, activation bits={args.act_bitwidth}")
    else:
        space_w = formatsearch.space_for_bitwidth(args.bitwidth, args.bias_candidates)
        space_a = formatsearch.space_for_bitwidth(args.act_bitwidth, args.bias_candidates)
        init_acts = CalibSet.load(args.acts)
        print(
            f"search: weights fp{args.bitwidth} ({space_w.candidate_count} candidates/tensor), "
            f"activations fp{args.act_bitwidth} ({space_a.candidate_count} candidates/tensor), "
            f"bias-candidates={args.bias_candidates}, propagate={args.propagate}"
        )
        if args.propagate:
            manifest = _propagated_assign(weights, init_acts, desc, space_w, space_a)
        else:
            manifest = formatsearch.assign_model(
                weights_list, init_acts, desc.layers, space_w, space_a
            )
    write_manifest(args.output, manifest)
    print(f"wrote manifest with {len(manifest.records)} records to {args.output}")
    return 0


def cmd_learn_rounding(args) -> int:
    weights = _load_weights(args.model)
    manifest = read_manifest(args.manifest)
    calib = CalibSet.load(args.calib)
    desc = netsim.PipelineDesc.load(args.pipeline)
    cfg = adaround.LearnConfig(
        iterations=args.iters,
        step_size=args.lr,
        batch_size=args.batch,
        reg_weight=args.reg_weight,
        seed=args.seed,
    )
    by_name = manifest.by_name()
    selected = set(args.tensor) if args.tensor else None
    if selected:
        for name in selected:
            rec = by_name.get(name)
            if rec is None:
                raise ValueError(f"no manifest record for tensor {name!r}")
            if rec.kind != "weight":
                raise ValueError(f"learn-rounding applies to weight records only, {name!r} is {rec.kind}")
    print(
        f"learn-rounding: iters={cfg.iterations} lr={_fmt(cfg.step_size)} "
        f"batch={cfg.batch_size} reg-weight={_fmt(cfg.reg_weight)} seed={cfg.seed}"
    )
    masks: list[Tensor] = []
    for layer in desc.layers:
        if layer["op"] not in ("conv2d", "linear"):
            continue
        wname = layer["w"]
        rec = by_name.get(wname)
        if rec is None or rec.mode != "fp":
            continue
        if selected is not None and wname not in selected:
            continue
        if rec.e_bits + rec.m_bits != 3:
            if selected is not None:
                raise ValueError(f"{wname!r} is not a 4-bit record; rounding learning targets FP4 weights")
            continue
        fmt = fpcodec.make_format(rec.e_bits, rec.m_bits, rec.bias)
        w = weights[wname]
        state = adaround.init_state(w, fmt)
        state = adaround.train(state, w, calib, layer, cfg)
        _, mask = adaround.finalize(state)
        mask_name = f"{wname}.mask"
        masks.append(Tensor(mask_name, mask))
        rec.rounding_mask_ref = mask_name
        print(
            f"  {wname}: objective {_fmt(state.trace[0])} -> {_fmt(min(state.trace))}, "
            f"mask ones={_fmt(float(mask.mean()))}"
        )
    if not masks:
        raise ValueError("no FP4 weight records to learn rounding for")
    write_container(args.masks_out, masks)
    write_manifest(args.manifest_out, manifest)
    print(f"wrote {len(masks)} masks to {args.masks_out} and manifest to {args.manifest_out}")
    return 0


def _simulate_rows(
    report: netsim.RunReport, manifest: QuantManifest | None, desc: netsim.PipelineDesc
) -> list[str]:
    rows = []
    recs = manifest.by_name() if manifest is not None else {}
    wname_by_layer = {l["name"]: l.get("w") for l in desc.layers}
    for stat in report.layers:
        rec = recs.get(wname_by_layer.get(stat.name) or "")
        fmt_name, bias = _record_format(rec)
        rows.append(
            f"{stat.name},{_fmt(stat.mse)},{_fmt(stat.sqnr_db)},{_fmt(stat.output_sparsity)},{fmt_name},{bias}"
        )
    return rows


def cmd_simulate(args) -> int:
    weights = _load_weights(args.model)
    desc = netsim.PipelineDesc.load(args.pipeline)
    manifest = read_manifest(args.manifest) if args.manifest else None
    masks = _load_weights(args.masks) if args.masks else None
    if manifest is not None and masks is not None:
        validate_masks(manifest, weights, masks)
    inputs = read_container(args.input)
    if not inputs:
        raise ValueError("input container is empty")
    report = netsim.run_pipeline(desc, weights, manifest, inputs[0].data, steps=args.steps, masks=masks)
    print(f"simulate: steps={args.steps} manifest={'yes' if manifest else 'no'}")
    for step, step_mse in enumerate(report.per_step_mse):
        print(f"  step {step}: output mse={_fmt(step_mse)}")
    for stat in report.layers:
        print(
            f"  step {stat.step} {stat.name}: mse={_fmt(stat.mse)} "
            f"sqnr_db={_fmt(stat.sqnr_db)} sparsity={_fmt(stat.output_sparsity)}"
        )
    if args.output:
        _write_text_atomic(args.output, "\n".join([CSV_HEADER] + _simulate_rows(report, manifest, desc)) + "\n")
        print(f"wrote report to {args.output}")
    return 0


def cmd_report(args) -> int:
    weights = _load_weights(args.model)
    manifest = read_manifest(args.manifest)
    masks = _load_weights(args.masks) if args.masks else None
    rows = []
    print("report: per-tensor quantization summary")
    for rec in manifest.records:
        if rec.kind != "weight" or rec.name not in weights:
            continue
        w = weights[rec.name]
        mask = None
        if rec.rounding_mask_ref is not None:
            if masks is None or rec.rounding_mask_ref not in masks:
                raise ValueError(f"mask {rec.rounding_mask_ref!r} not provided (--masks)")
            mask = masks[rec.rounding_mask_ref]
        q = netsim._quantize_by_record(w, rec, mask)
        err = mse(w, q)
        try:
            s_db = sqnr_db(w, q)
        except ValueError:
            s_db = math.nan
        fmt_name, bias = _record_format(rec)
        raw_sp = sparsity(w)
        q_sp = sparsity(q)
        rows.append(f"{rec.name},{_fmt(err)},{_fmt(s_db)},{_fmt(q_sp)},{fmt_name},{bias}")
        print(
            f"  {rec.name}: mse={_fmt(err)} sqnr_db={_fmt(s_db)} "
            f"sparsity {_fmt(raw_sp)} -> {_fmt(q_sp)} format={fmt_name or 'passthrough'}"
        )
    if args.output:
        _write_text_atomic(args.output, "\n".join([CSV_HEADER] + rows) + "\n")
        print(f"wrote report to {args.output}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="fpquant", description="Minifloat/integer post-training quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("inspect", help="list tensors in a container")
    sp.add_argument("container")
    sp.set_defaults(fn=cmd_inspect)

    sp = sub.add_parser("quantize", help="quantize every tensor in a container")
    sp.add_argument("container")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--e-bits", type=int)
    sp.add_argument("--m-bits", type=int)
    sp.add_argument("--bias", type=float, default=None)
    sp.add_argument("--int", action="store_true", help="integer mode")
    sp.add_argument("--bitwidth", type=int, default=8, choices=(4, 8))
    sp.set_defaults(fn=cmd_quantize)

    sp = sub.add_parser("search", help="per-tensor encoding/bias search")
    sp.add_argument("--model", required=True)
    sp.add_argument("--acts", help="initialization activation container")
    sp.add_argument("--pipeline", required=True)
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--bitwidth", type=int, default=8, choices=(4, 8), help="weight bitwidth")
    sp.add_argument("--act-bitwidth", type=int, default=8, choices=(4, 8))
    sp.add_argument("--bias-candidates", type=int, default=formatsearch.DEFAULT_BIAS_CANDIDATES)
    sp.add_argument("--propagate", action="store_true",
                    help="re-capture activations through the partially quantized pipeline")
    sp.add_argument("--int", action="store_true", help="integer-baseline manifest")
    sp.set_defaults(fn=cmd_search)

    sp = sub.add_parser("learn-rounding", help="gradient rounding learning for FP4 weights")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--calib", required=True)
    sp.add_argument("--pipeline", required=True)
    sp.add_argument("--masks-out", required=True)
    sp.add_argument("--manifest-out", required=True)
    sp.add_argument("--tensor", action="append", help="restrict to named weight tensors")
    sp.add_argument("--iters", type=int, default=adaround.LearnConfig.iterations)
    sp.add_argument("--lr", type=float, default=adaround.LearnConfig.step_size)
    sp.add_argument("--batch", type=int, default=adaround.LearnConfig.batch_size)
    sp.add_argument("--reg-weight", type=float, default=adaround.LearnConfig.reg_weight)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_learn_rounding)

    sp = sub.add_parser("simulate", help="run the pipeline quantized vs full precision")
    sp.add_argument("--pipeline", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--masks")
    sp.add_argument("--input", required=True)
    sp.add_argument("--steps", type=int, default=1)
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("report", help="sparsity/MSE table for a quantized model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--masks")
    sp.add_argument("-o", "--output")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, ManifestError, ValueError, KeyError) as exc:
        msg = exc.args[0] if exc.args else exc
        print(f"validation error: {msg}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
