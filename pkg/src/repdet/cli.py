"""Command-line entry point: build, fuse, count, train, eval, quantize, bench.

Exit codes: 0 success, 1 precondition failure (bad flags, missing or
incompatible inputs), 2 verification failure.

For ``train``, values come from the built-in defaults, then the ``--config``
file, then explicit flags (highest precedence).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import quantsim
from . import tensor as T
from .netdef import (
    ConfigError,
    WeightFormatError,
    build,
    count_params_flops,
    fuse_model,
    fusion_max_error,
    load_weights,
    preset,
    read_checkpoint,
    save_weights,
)
from .netdef.weights import atomic_write_bytes
from .tensor import Tensor

FUSE_TOL = 1e-4


class UsageError(Exception):
    pass


class Precondition(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _load(path) -> "object":
    if not Path(path).is_file():
        raise Precondition(f"no such checkpoint: {path}")
    try:
        if "quant" in read_checkpoint(path)[1]:
            return quantsim.load_quantized(path)
        return load_weights(path)
    except (WeightFormatError, ConfigError, OSError) as e:
        raise Precondition(f"{path}: {e}") from None


def _data(spec: str, size: int, num_classes: int):
    from .trainer import parse_data_spec

    try:
        return parse_data_spec(spec, size, num_classes)
    except ValueError as e:
        raise Precondition(str(e)) from None


# -- subcommands ------------------------------------------------------------------------

def cmd_build(a) -> int:
    try:
        m = build(a.variant, seed=a.seed, num_classes=a.num_classes)
    except ConfigError as e:
        raise Precondition(str(e)) from None
    save_weights(m, a.out)
    print(f"wrote {a.out} variant={a.variant} seed={a.seed}")
    return 0


def cmd_fuse(a) -> int:
    m = _load(a.inp)
    if m.fused:
        raise Precondition(f"{a.inp} is already fused")
    f = fuse_model(m)
    if a.verify:
        err = fusion_max_error(m, f, a.samples, (a.input, a.input), a.seed)
        ok = err <= FUSE_TOL
        print(f"max_abs_error={err:.3e} tol={FUSE_TOL:.0e} {'PASS' if ok else 'FAIL'}")
        if not ok:
            return 2
    save_weights(f, a.out)
    print(f"wrote {a.out}")
    return 0


def cmd_count(a) -> int:
    if a.inp:
        m = _load(a.inp)
    else:
        m = build(a.variant, num_classes=a.num_classes)
        if not a.unfused:
            m = fuse_model(m)
    c = count_params_flops(m, (a.input, a.input))
    if a.kv:
        print(f"params={c.params}")
        print(f"flops={c.flops}")
        print(f"macs={c.macs}")
        print(f"fused={int(m.fused)}")
        print(f"input={a.input}")
    else:
        print(f"graph:  {'fused' if m.fused else 'unfused'} ({m.cfg.variant}), input {a.input}x{a.input}")
        print(f"params: {c.params:,} ({c.params / 1e6:.2f} M)")
        print(f"FLOPs:  {c.flops / 1e9:.2f} G (2 x MACs)")
        print(f"MACs:   {c.macs / 1e9:.2f} G")
    return 0


def cmd_train(a) -> int:
    from .trainer import TrainConfig, configs_from_dict, load_config, train

    try:
        if a.config:
            mcfg, tcfg = load_config(a.config)
        else:
            mcfg, tcfg = configs_from_dict({})
        if a.variant:
            mcfg = preset(a.variant, num_classes=mcfg.num_classes)
        overrides = {k: v for k, v in (("epochs", a.epochs), ("seed", a.seed), ("batch_size", a.batch_size),
                                       ("img_size", a.img_size), ("teacher", a.teacher)) if v is not None}
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), **overrides})
    except (OSError, ValueError) as e:
        raise Precondition(f"config: {e}") from None
    if tcfg.teacher and not Path(tcfg.teacher).is_file():
        raise Precondition(f"no such teacher checkpoint: {tcfg.teacher}")
    data = _data(a.data, tcfg.img_size, mcfg.num_classes)
    print("\t".join(("epoch", "lr", "loss_cls", "loss_box", "loss_dfl", "loss_distill", "ap", "ap50", "wall")))
    res = train(None, tcfg, data, mcfg=mcfg, out_dir=a.out, log=lambda s: print(s, flush=True))
    last = res.rows[-1]
    print(f"final ap={last[6]:.4f} ap50={last[7]:.4f}; wrote {a.out}/last.rdet, {a.out}/ema.rdet, {a.out}/metrics.tsv")
    return 0


def cmd_eval(a) -> int:
    from .trainer import evaluate_model

    m = _load(a.inp)
    data = _data(a.data, a.size, m.cfg.num_classes)
    target = a.input if a.input else a.size + (32 if a.mode == "border" else 0)
    if target % 32:
        raise Precondition(f"input size {target} must be a multiple of 32")
    res = evaluate_model(m, data, a.mode, target)
    print(f"ap={res.ap:.6f}")
    print(f"ap50={res.ap50:.6f}")
    print(f"mode={a.mode}")
    print(f"input={target}")
    print(f"images={len(data)}")
    return 0


def cmd_quantize(a) -> int:
    m = _load(a.inp)
    if not m.fused:
        raise Precondition(f"{a.inp} is not fused; run `repdet fuse` first")
    calib = np.stack([s.image for s in _data(a.calib, a.size, m.cfg.num_classes)])
    probe = np.stack([s.image for s in _data(a.probe or a.calib, a.size, m.cfg.num_classes)])
    n_layers = len(quantsim.quantizable_layers(m))
    if not 0 <= a.keep_float <= n_layers:
        raise Precondition(f"--keep-float must be in [0, {n_layers}]")
    q = quantsim.calibrate(m, calib, a.calib_mode)
    report = quantsim.sensitivity(m, q, probe, a.keep_float)
    qm = quantsim.partial_quantize(m, q, report, a.keep_float)
    ref = quantsim.flat_outputs(m.forward(Tensor(probe.astype(np.float32))))
    got = quantsim.flat_outputs(qm.forward(Tensor(probe.astype(np.float32))))
    atomic_write_bytes(a.report, report.to_text().encode())
    quantsim.save_quantized(qm, a.out)
    print(f"layers={n_layers} kept_float={a.keep_float}: {', '.join(report.with_keep(a.keep_float).kept_float)}")
    print(f"cosine={quantsim.cosine(ref, got):.6f}")
    print(f"wrote {a.out} and {a.report}")
    return 0


def _latency(m, x: Tensor, repeat: int) -> np.ndarray:
    m.eval()
    m(x)  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        m(x)
        times.append((time.perf_counter() - t0) * 1e3)
    return np.array(times)


def cmd_bench(a) -> int:
    m = _load(a.inp)
    if m.fused:
        raise Precondition("bench needs an unfused checkpoint (it times both graphs)")
    f = fuse_model(m)
    rng = np.random.default_rng(0)
    rows = [("unfused", m, a.input), ("fused", f, a.input)]
    if a.border:
        rows.append(("fused+border", f, a.input + 32))
    with T.accumulate(np.float32):
        for name, model, size in rows:
            x = Tensor(rng.random((a.batch, 3, size, size)).astype(np.float32))
            t = _latency(model, x, a.repeat)
            shapes = ",".join(f"{c.shape[2]}x{c.shape[3]}" for c in model(x).cls)
            print(f"graph={name} input={size} batch={a.batch} repeat={a.repeat} mean_ms={t.mean():.2f} "
                  f"p50_ms={np.percentile(t, 50):.2f} p95_ms={np.percentile(t, 95):.2f} grids={shapes}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repdet", description="re-parameterizable detector toolkit", allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build", allow_abbrev=False, help="initialize a checkpoint")
    s.add_argument("--variant", default="n", choices=("n", "s", "m", "l"))
    s.add_argument("--num-classes", type=int, default=80)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_build)

    s = sub.add_parser("fuse", allow_abbrev=False, help="collapse re-parameterizable branches")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--verify", action="store_true", help="check fused == unfused (max abs error <= 1e-4)")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--input", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_fuse)

    s = sub.add_parser("count", allow_abbrev=False, help="parameters and FLOPs")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--in", dest="inp")
    g.add_argument("--variant", choices=("n", "s", "m", "l"))
    s.add_argument("--num-classes", type=int, default=80)
    s.add_argument("--unfused", action="store_true", help="with --variant: count the training graph")
    s.add_argument("--input", type=int, default=640)
    s.add_argument("--kv", action="store_true", help="machine-readable key=value lines")
    s.set_defaults(fn=cmd_count)

    s = sub.add_parser("train", allow_abbrev=False, help="train on a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--data", required=True, help="synth:N:SEED")
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=("n", "s", "m", "l"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--img-size", type=int)
    s.add_argument("--teacher")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", allow_abbrev=False, help="AP / AP50 on a synthetic dataset")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--data", required=True, help="synth:N:SEED")
    s.add_argument("--mode", choices=("border", "resize"), default="resize")
    s.add_argument("--size", type=int, default=64, help="generated image size")
    s.add_argument("--input", type=int, help="network input size (default: size, +32 in border mode)")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("quantize", allow_abbrev=False, help="INT8 simulation with sensitivity-guided float fallback")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--calib", required=True, help="synth:N:SEED")
    s.add_argument("--probe", help="synth:N:SEED (default: the calibration set)")
    s.add_argument("--calib-mode", choices=("maxabs", "percentile"), default="maxabs")
    s.add_argument("--keep-float", type=int, default=quantsim.KEEP_FLOAT)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_quantize)

    s = sub.add_parser("bench", allow_abbrev=False, help="forward latency, unfused vs fused")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--repeat", type=int, default=10)
    s.add_argument("--input", type=int, default=320)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--border", action="store_true", help="also time the fused graph on a +32 px bordered input")
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except Precondition as e:
        print(f"repdet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
