"""Command-line front end.

Subcommands::

    denoise              denoise one image with fixed parameters
    learn-lambda-scalar  learn a scalar fidelity weight from a clean reference
    learn-lambda-spatial learn a spatially varying fidelity field
    learn-weight         learn the kernel decay weight
    train-batch          learn one scalar fidelity weight over several pairs
    sweep                tabulate the training loss on a (lambda, weight) grid
    metrics              quality metrics between two images

Options can also come from a flat ``key=value`` config file (``--config``);
explicit command-line flags win over the file, which wins over the built-in
defaults.  The effective configuration is printed at startup.  Noise
variances accept the named half-decade presets a-d besides literal numbers;
presets also choose the matched kernel decay scale delta (w = delta**-2)
and the weight-learning guard factor.  Existing output files are never
overwritten unless ``--overwrite`` is given.

Exit codes: 0 success, 2 configuration, 3 file I/O, 4 linear solver,
5 optimizer.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from . import gradients as gr
from .estimators import (
    KernelWeightDenoiser,
    NonlocalMeansDenoiser,
    ScalarFidelityDenoiser,
    SpatialFidelityDenoiser,
    REFERENCE_WEIGHT,
)
from .imaging import (
    DELTA_PRESETS,
    SIGMA2_PRESETS,
    Image,
    NoiseSpec,
    add_gaussian_noise,
    quality_report,
    read_image,
    write_image,
)
from .kernel import (
    PatchConfig,
    assemble_kernel,
    build_dissimilarity,
    default_interaction_radius,
    dump_dissimilarity,
    load_dissimilarity,
)
from .optimizer import OptimizerError, write_trace
from .solver import SolverError

GUARD_PRESETS = {"a": 12.0, "b": 9.0, "c": 6.0, "d": 3.0}

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SOLVER = 4
EXIT_OPTIMIZER = 5


class ConfigError(ValueError):
    """Invalid or inconsistent command-line / config-file options."""


def _fmt(x):
    return f"{x:.17g}"


def _fmt4(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return f"{x:.4f}"


# ---------------------------------------------------------------------------
# Option handling
# ---------------------------------------------------------------------------

_DEFAULTS = {
    "sigma2": None,
    "delta": None,
    "w": None,
    "rho": 5,
    "eps": None,
    "iota": 1e-9,
    "lambda0": 100.0,
    "beta": 1e-4,
    "upper": 1e5,
    "kappa": 1e-6,
    "w0": 1.1e-6,
    "guard": None,
    "seed": 0,
    "tol": 1e-8,
    "max_iter": 100,
    "solver_tol": 1e-10,
    "mu": 0.5,
}

_COMMAND_DEFAULTS = {
    "learn-lambda-spatial": {"upper": 255.0, "lambda0": 200.0},
    "learn-weight": {"lambda0": 0.5, "iota": 1e-10},
}

_FLOAT_KEYS = {
    "delta", "w", "iota", "lambda0", "beta", "upper", "kappa", "w0",
    "guard", "tol", "solver_tol", "mu",
}
_INT_KEYS = {"rho", "eps", "seed", "max_iter"}


def load_config_file(path):
    """Parse a flat key=value file (``#`` starts a comment)."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(key, val):
    if val is None or not isinstance(val, str):
        return val
    try:
        if key in _INT_KEYS:
            return int(val)
        if key in _FLOAT_KEYS:
            return float(val)
    except ValueError as exc:
        raise ConfigError(f"option {key}: cannot parse {val!r}") from exc
    return val


class Options:
    """Effective option set: CLI flags over config file over defaults."""

    def __init__(self, args):
        file_values = load_config_file(args.config) if args.config else {}
        merged = dict(_DEFAULTS)
        merged.update(_COMMAND_DEFAULTS.get(args.command, {}))
        explicit = set()
        for key in merged:
            if key in file_values:
                merged[key] = _coerce(key, file_values[key])
                explicit.add(key)
        for key in merged:
            cli_val = getattr(args, key, None)
            if cli_val is not None:
                merged[key] = cli_val
                explicit.add(key)
        self._values = merged
        self._explicit = explicit
        self.command = args.command
        self.args = args
        self._resolve_noise()

    def __getattr__(self, key):
        if key.startswith("_"):
            raise AttributeError(key)
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key)

    def is_explicit(self, key):
        """True when the option came from a flag or the config file."""
        return key in self._explicit

    def _resolve_noise(self):
        v = self._values
        sigma2 = v["sigma2"]
        preset = None
        if isinstance(sigma2, str):
            token = sigma2.strip().lower()
            if token in SIGMA2_PRESETS:
                preset = token
                v["sigma2"] = SIGMA2_PRESETS[token]
            else:
                try:
                    v["sigma2"] = float(token)
                except ValueError:
                    raise ConfigError(
                        f"--sigma2 must be a number or one of {sorted(SIGMA2_PRESETS)}"
                    )
        if v["w"] is None:
            delta = v["delta"]
            if delta is None:
                delta = DELTA_PRESETS.get(preset, DELTA_PRESETS["b"])
                v["delta"] = delta
            v["w"] = float(delta) ** -2
        if v["guard"] is None:
            v["guard"] = GUARD_PRESETS.get(preset, GUARD_PRESETS["b"])
        if v["sigma2"] is not None and not v["sigma2"] > 0:
            raise ConfigError("--sigma2 must be positive")

    def effective(self):
        items = dict(self._values)
        items["command"] = self.command
        return items

    def print_effective(self):
        print("# effective configuration")
        for key in sorted(self.effective()):
            print(f"{key}={self.effective()[key]}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="nldenoise",
        description="Nonlocal-means denoising with learned parameters.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, batch=False):
        inp = p.add_argument
        if batch:
            inp("--input", action="append", help="noisy input image (repeatable)")
            inp("--truth", action="append", help="clean reference image (repeatable)")
        else:
            inp("--input", help="noisy input image (PGM or PNG)")
            inp("--truth", help="clean reference image")
        inp("--out", help="output directory")
        inp("--config", help="flat key=value option file")
        inp("--sigma2", help="noise variance (number or preset a|b|c|d) "
                            "used to synthesise noise on --truth")
        inp("--delta", type=float, help="kernel decay scale; w = delta**-2")
        inp("--w", type=float, help="kernel decay weight (overrides --delta)")
        inp("--rho", type=int, help="patch radius (default 5)")
        inp("--eps", type=int, help="interaction radius (default from image size)")
        inp("--iota", type=float, help="kernel mask threshold")
        inp("--lambda0", type=float, help="fidelity weight / its starting value")
        inp("--beta", type=float, help="H1 penalty weight of the fidelity field")
        inp("--upper", type=float, help="upper box bound of the learned parameter")
        inp("--kappa", type=float, help="weight-learning variable rescaling")
        inp("--w0", type=float, help="weight-learning starting weight")
        inp("--guard", type=float, help="weight upper-bound guard factor")
        inp("--seed", type=int, help="noise RNG seed")
        inp("--tol", type=float, help="optimizer stationarity tolerance")
        inp("--max-iter", dest="max_iter", type=int, help="optimizer iteration budget")
        inp("--solver-tol", dest="solver_tol", type=float, help="linear solver tolerance")
        inp("--mu", type=float, help="diffusion constant (default 0.5)")
        inp("--dcache", help="binary cache file for the patch-distance matrix")
        inp("--overwrite", action="store_true", default=None,
            help="allow replacing existing output files")

    common(sub.add_parser("denoise", help="denoise with fixed parameters"))
    common(sub.add_parser("learn-lambda-scalar", help="learn a scalar fidelity weight"))
    common(sub.add_parser("learn-lambda-spatial", help="learn a fidelity field"))
    common(sub.add_parser("learn-weight", help="learn the kernel decay weight"))
    common(sub.add_parser("train-batch", help="learn one fidelity weight over a batch"),
           batch=True)
    p_sweep = sub.add_parser("sweep", help="loss surface on a parameter grid")
    common(p_sweep)
    p_sweep.add_argument("--lambda-grid", dest="lambda_grid",
                         help="comma list or logspace:lo:hi:n")
    p_sweep.add_argument("--weight-grid", dest="weight_grid",
                         help="comma list or logspace:lo:hi:n")
    common(sub.add_parser("metrics", help="SSIM/PSNR/L2 between --input and --truth"))
    return parser


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _outdir(opts):
    if not opts.args.out:
        raise ConfigError("--out directory is required for this command")
    out = Path(opts.args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard_clobber(opts, *paths):
    if opts.args.overwrite:
        return
    for p in paths:
        if Path(p).exists():
            raise ConfigError(f"refusing to overwrite {p} (use --overwrite)")


def _interaction_radius(opts, height, width):
    if opts.eps is not None:
        return int(opts.eps)
    return default_interaction_radius(height, width)


def _load_pair(opts, input_path, truth_path):
    """Load (noisy, truth) for one run; synthesise noise when asked.

    Returns (noisy, truth_or_None, synthesised_flag).
    """
    truth = None
    if truth_path:
        probe = read_image(truth_path, 0)
        eps = _interaction_radius(opts, probe.height, probe.width)
        truth = Image.from_interior(probe.interior, eps)
    if input_path:
        probe = read_image(input_path, 0)
        eps = _interaction_radius(opts, probe.height, probe.width)
        noisy = Image.from_interior(probe.interior, eps)
        if truth is not None and (noisy.height, noisy.width) != (truth.height, truth.width):
            raise ConfigError("--input and --truth image sizes differ")
        return noisy, truth, False
    if truth is None:
        raise ConfigError("need --input, or --truth with --sigma2 to synthesise noise")
    if opts.sigma2 is None:
        raise ConfigError("need --sigma2 to synthesise a noisy image from --truth")
    noisy = add_gaussian_noise(truth, NoiseSpec(opts.sigma2, opts.seed))
    return noisy, truth, True


def _image_ext(opts):
    src = opts.args.input or opts.args.truth
    if src and str(src).lower().endswith(".pgm"):
        return ".pgm"
    return ".png"


def _kernel(opts, image, weight=None):
    cfg = PatchConfig(
        patch_radius=opts.rho,
        interaction_radius=image.pad,
        threshold=opts.iota,
    )
    cache = getattr(opts.args, "dcache", None)
    if cache and Path(cache).exists():
        dis = load_dissimilarity(cache)
        if (dis.grid_shape != image.values.shape or dis.pad != image.pad
                or dis.patch_radius != cfg.patch_radius
                or dis.interaction_radius != cfg.interaction_radius):
            raise ConfigError(f"--dcache {cache} does not match this image/configuration")
    else:
        dis = build_dissimilarity(image, cfg)
        if cache:
            dump_dissimilarity(cache, dis)
    w = opts.w if weight is None else weight
    return assemble_kernel(dis, w, cfg.threshold)


def _write_summary(path, rows, header):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _quality_row(name, denoised, truth):
    q = quality_report(denoised, truth).rounded(4)
    return q, [name, _fmt4(q.ssim), _fmt4(q.psnr), _fmt(q.l2_loss)]


def _estimator_kwargs(opts):
    return dict(
        weight=opts.w,
        patch_radius=opts.rho,
        threshold=opts.iota,
        mu=opts.mu,
        solver_tol=opts.solver_tol,
        tol=opts.tol,
        max_iter=opts.max_iter,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_denoise(opts):
    noisy, truth, synthesised = _load_pair(opts, opts.args.input, opts.args.truth)
    out = _outdir(opts)
    ext = _image_ext(opts)
    den_path = out / f"denoised{ext}"
    noisy_path = out / f"noisy{ext}"
    summary_path = out / "summary.csv"
    _guard_clobber(opts, den_path, summary_path, *( [noisy_path] if synthesised else [] ))

    kern = _kernel(opts, noisy)
    denoised, report = gr.denoise_image(noisy, kern, opts.lambda0, mu=opts.mu,
                                        tol=opts.solver_tol)
    write_image(den_path, denoised)
    if synthesised:
        write_image(noisy_path, noisy)
    print(f"state solve: {report.iterations} iterations, "
          f"residual {report.residual:.2e}")
    if truth is not None:
        q, row = _quality_row(den_path.name, denoised, truth)
        qn, row_n = _quality_row("noisy", noisy, truth)
        _write_summary(summary_path, [row, row_n], ["image", "ssim", "psnr", "l2_loss"])
        print(f"denoised: SSIM {q.ssim:.2f}, PSNR {q.psnr:.2f} dB "
              f"(noisy: SSIM {qn.ssim:.2f}, PSNR {qn.psnr:.2f} dB)")
    print(f"wrote {den_path}")
    return EXIT_OK


def _finish_learning(opts, out, est, noisy, truth, denoised, extra_cols, ext):
    trace_path = out / "trace.csv"
    summary_path = out / "summary.csv"
    den_path = out / f"denoised{ext}"
    write_trace(trace_path, est.result_.trace)
    write_image(den_path, denoised)
    q, row = _quality_row(den_path.name, denoised, truth)
    header = ["image"] + [c for c, _ in extra_cols] + \
        ["ssim", "psnr", "l2_loss", "iterations", "status"]
    values = [row[0]] + [v for _, v in extra_cols] + \
        row[1:] + [str(est.n_iter_), est.result_.status]
    _write_summary(summary_path, [values], header)
    print(f"finished in {est.n_iter_} iterations ({est.result_.status}); "
          f"SSIM {q.ssim:.2f}, PSNR {q.psnr:.2f} dB")
    print(f"wrote {den_path}, {trace_path}, {summary_path}")


def cmd_learn_lambda_scalar(opts):
    noisy, truth, synthesised = _load_pair(opts, opts.args.input, opts.args.truth)
    if truth is None:
        raise ConfigError("learning requires --truth")
    out = _outdir(opts)
    ext = _image_ext(opts)
    _guard_clobber(opts, out / f"denoised{ext}", out / "trace.csv", out / "summary.csv",
                   *([out / f"noisy{ext}"] if synthesised else []))
    est = ScalarFidelityDenoiser(
        lam0=opts.lambda0, upper=opts.upper,
        interaction_radius=noisy.pad, **_estimator_kwargs(opts),
    )
    est.fit(noisy, truth)
    denoised = noisy.with_interior(est.transform(noisy))
    if synthesised:
        write_image(out / f"noisy{ext}", noisy)
    print(f"learned fidelity weight: {est.lam_:.17g}")
    _finish_learning(opts, out, est, noisy, truth, denoised,
                     [("best_lambda", _fmt(est.lam_))], ext)
    return EXIT_OK


def cmd_learn_lambda_spatial(opts):
    noisy, truth, synthesised = _load_pair(opts, opts.args.input, opts.args.truth)
    if truth is None:
        raise ConfigError("learning requires --truth")
    out = _outdir(opts)
    ext = _image_ext(opts)
    map_png = out / "lambda_map.png"
    map_raw = out / "lambda_map.npy"
    _guard_clobber(opts, out / f"denoised{ext}", out / "trace.csv",
                   out / "summary.csv", map_png, map_raw,
                   *([out / f"noisy{ext}"] if synthesised else []))
    est = SpatialFidelityDenoiser(
        lam0=opts.lambda0, upper=opts.upper, beta=opts.beta,
        interaction_radius=noisy.pad, **_estimator_kwargs(opts),
    )
    est.fit(noisy, truth)
    denoised = noisy.with_interior(est.transform(noisy))
    if synthesised:
        write_image(out / f"noisy{ext}", noisy)
    np.save(map_raw, est.lam_map_)
    write_image(map_png, est.lam_map_, normalize=True)
    lam_min, lam_max = float(est.lam_map_.min()), float(est.lam_map_.max())
    print(f"learned fidelity field in [{lam_min:.17g}, {lam_max:.17g}] "
          f"(beta={opts.beta:g})")
    _finish_learning(opts, out, est, noisy, truth, denoised,
                     [("lambda_min", _fmt(lam_min)), ("lambda_max", _fmt(lam_max))],
                     ext)
    print(f"wrote {map_png}, {map_raw}")
    return EXIT_OK


def cmd_learn_weight(opts):
    noisy, truth, synthesised = _load_pair(opts, opts.args.input, opts.args.truth)
    if truth is None:
        raise ConfigError("learning requires --truth")
    out = _outdir(opts)
    ext = _image_ext(opts)
    _guard_clobber(opts, out / f"denoised{ext}", out / "trace.csv", out / "summary.csv",
                   *([out / f"noisy{ext}"] if synthesised else []))
    est = KernelWeightDenoiser(
        w0=opts.w0, lam=opts.lambda0, kappa=opts.kappa, guard=opts.guard,
        upper=opts.upper if opts.is_explicit("upper") else None,
        interaction_radius=noisy.pad,
        patch_radius=opts.rho, threshold=opts.iota, mu=opts.mu,
        solver_tol=opts.solver_tol, tol=opts.tol, max_iter=opts.max_iter,
    )
    est.fit(noisy, truth)
    denoised = noisy.with_interior(est.transform(noisy))
    if synthesised:
        write_image(out / f"noisy{ext}", noisy)
    print(f"learned kernel weight: {est.weight_:.17g} (bound {est.upper_:.17g})")
    _finish_learning(opts, out, est, noisy, truth, denoised,
                     [("best_weight", _fmt(est.weight_)),
                      ("upper_bound", _fmt(est.upper_))], ext)
    return EXIT_OK


def cmd_train_batch(opts):
    inputs = opts.args.input or []
    truths = opts.args.truth or []
    if not truths:
        raise ConfigError("train-batch requires --truth (repeatable)")
    if inputs and len(inputs) != len(truths):
        raise ConfigError("--input and --truth counts differ")
    pairs = []
    for i, tpath in enumerate(truths):
        noisy, truth, _ = _load_pair(opts, inputs[i] if inputs else None, tpath)
        pairs.append((noisy, truth))
    out = _outdir(opts)
    den_paths = [out / f"denoised_{i:02d}.png" for i in range(len(pairs))]
    _guard_clobber(opts, out / "trace.csv", out / "summary.csv", *den_paths)

    noisy_list = [n for n, _ in pairs]
    truth_list = [t for _, t in pairs]
    est = ScalarFidelityDenoiser(
        lam0=opts.lambda0, upper=opts.upper,
        interaction_radius=noisy_list[0].pad, **_estimator_kwargs(opts),
    )
    est.fit(noisy_list, truth_list)
    write_trace(out / "trace.csv", est.result_.trace)
    rows = []
    for i, (noisy, truth) in enumerate(pairs):
        den = noisy.with_interior(est.transform(noisy))
        write_image(den_paths[i], den)
        _, row = _quality_row(Path(truths[i]).name, den, truth)
        rows.append([row[0], _fmt(est.lam_)] + row[1:]
                    + [str(est.n_iter_), est.result_.status])
    _write_summary(out / "summary.csv", rows,
                   ["image", "best_lambda", "ssim", "psnr", "l2_loss",
                    "iterations", "status"])
    print(f"learned fidelity weight over {len(pairs)} images: {est.lam_:.17g} "
          f"in {est.n_iter_} iterations ({est.result_.status})")
    return EXIT_OK


def _parse_grid(spec, fallback):
    if spec is None:
        return np.asarray(fallback, dtype=np.float64)
    text = spec.strip()
    if text.startswith("logspace:"):
        try:
            _, lo, hi, n = text.split(":")
            return np.logspace(math.log10(float(lo)), math.log10(float(hi)), int(n))
        except ValueError as exc:
            raise ConfigError(f"bad grid spec {spec!r}; want logspace:lo:hi:n") from exc
    try:
        return np.asarray([float(tok) for tok in text.split(",") if tok], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"bad grid spec {spec!r}") from exc


def cmd_sweep(opts):
    noisy, truth, _ = _load_pair(opts, opts.args.input, opts.args.truth)
    if truth is None:
        raise ConfigError("sweep requires --truth")
    out = _outdir(opts)
    sweep_path = out / "sweep.csv"
    _guard_clobber(opts, sweep_path)
    lambdas = _parse_grid(opts.args.lambda_grid, np.logspace(-2, 4, 13))
    weights = _parse_grid(opts.args.weight_grid, [opts.w])
    cfg = PatchConfig(opts.rho, noisy.pad, opts.iota)
    dis = build_dissimilarity(noisy, cfg)
    ref = assemble_kernel(dis, REFERENCE_WEIGHT, opts.iota)
    losses = gr.loss_surface(noisy, truth, ref, lambdas, weights,
                             mu=opts.mu, tol=opts.solver_tol)
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "weight", "loss"])
        for iw, w in enumerate(weights):
            for il, lam in enumerate(lambdas):
                writer.writerow([_fmt(lam), _fmt(w), _fmt(losses[iw, il])])
    print(f"wrote {sweep_path} ({losses.size} rows)")
    return EXIT_OK


def cmd_metrics(opts):
    if not opts.args.input or not opts.args.truth:
        raise ConfigError("metrics requires --input and --truth")
    cand = read_image(opts.args.input, 0)
    truth = read_image(opts.args.truth, 0)
    q = quality_report(cand, truth).rounded(4)
    print(f"ssim={_fmt4(q.ssim)} psnr={_fmt4(q.psnr)} l2_loss={_fmt(q.l2_loss)}")
    if opts.args.out:
        out = _outdir(opts)
        path = out / "metrics.csv"
        _guard_clobber(opts, path)
        _write_summary(path, [[Path(opts.args.input).name, _fmt4(q.ssim),
                               _fmt4(q.psnr), _fmt(q.l2_loss)]],
                       ["image", "ssim", "psnr", "l2_loss"])
        print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "denoise": cmd_denoise,
    "learn-lambda-scalar": cmd_learn_lambda_scalar,
    "learn-lambda-spatial": cmd_learn_lambda_spatial,
    "learn-weight": cmd_learn_weight,
    "train-batch": cmd_train_batch,
    "sweep": cmd_sweep,
    "metrics": cmd_metrics,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = Options(args)
        opts.print_effective()
        return _COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OptimizerError as exc:
        print(f"optimizer error: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZER


if __name__ == "__main__":
    sys.exit(main())
