"""Experiment harness: generate artifacts, run mechanism and accountant
checks, calibration sweeps, attacks, the wire server/client, and parameter
sweeps emitting plot-ready CSV/JSON.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import attack, calib, fdp, lm, pipeline, proj, wire
from .core import EmbeddingTable, RngHandle, TokenSequence, load_table, save_table
from .mech import MechanismParams, dequantize, stochastic_quantize

DEFAULT_C = 0.05
DEFAULT_R = 20
DEFAULT_N = 1
DEFAULT_DIM_RATIO = 32  # d = b / 32 unless overridden


def _load_config(path):
    cfg = {}
    if path:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#") and "=" in line:
                    k, v = line.split("=", 1)
                    cfg[k.strip()] = v.strip()
    return cfg


def _resolve(args, cfg, key, default, cast=float):
    val = getattr(args, key.replace("-", "_"), None)
    if val is not None:
        return val
    if key in cfg:
        return cast(cfg[key])
    return default


def _random_table(V, b, rng: RngHandle, rank: int | None = None) -> EmbeddingTable:
    """Random table; a small `rank` gives rows on a low-dimensional subspace
    so that a latent projection with d >= rank can be near-lossless."""
    gen = rng.generator()
    if rank is None:
        rows = gen.standard_normal((V, b)) / math.sqrt(b)
    else:
        rows = gen.standard_normal((V, rank)) @ gen.standard_normal((rank, b))
        rows /= math.sqrt(rank * b)
    return EmbeddingTable(rows)


def _synth_corpus(model: lm.ToyLm, n_seqs: int, T: int, rng: RngHandle,
                  temperature: float = 0.3) -> list[TokenSequence]:
    """Sample sequences from the toy model's own conditional distributions."""
    out = []
    prompt = lm.empty_prompt(model.table.b)
    for s in range(n_seqs):
        gen = rng.child(s).generator()
        ids = [int(gen.integers(model.V))]
        ctx = [model.table.rows[ids[0]]]
        for _ in range(T - 1):
            h = lm.context_state(prompt, np.asarray(ctx), len(ctx))
            logits = (model.W_out @ h + model.bias) / temperature
            logits -= logits.max()
            p = np.exp(logits)
            p /= p.sum()
            tok = int(gen.choice(model.V, p=p))
            ids.append(tok)
            ctx.append(model.table.rows[tok])
        out.append(TokenSequence(ids))
    return out


def _eval_nll(model, prompt, cfg, corpus, rng):
    nlls = []
    for i, seq in enumerate(corpus):
        q = pipeline.privatize_tokens(seq, cfg, rng.child(i))
        xhat = pipeline.reconstruct(q, cfg.proj)
        nlls.append(lm.next_token_nll(model, prompt, xhat, seq))
    return float(np.mean(nlls))


def _mean_cosine(cfg, corpus, rng):
    """Mean cosine similarity between privatized and original embeddings."""
    sims = []
    for i, seq in enumerate(corpus):
        x = cfg.table.embed(seq)
        q = pipeline.privatize_tokens(seq, cfg, rng.child(i))
        xhat = pipeline.reconstruct(q, cfg.proj)
        num = np.sum(x * xhat, axis=1)
        den = np.linalg.norm(x, axis=1) * np.linalg.norm(xhat, axis=1)
        den[den == 0] = 1.0
        sims.append(np.mean(num / den))
    return float(np.mean(sims))


def _experiment(args, cfgfile, seed, d=None, mu=None, A=None, n=None):
    """Shared toy-experiment builder used by calibrate/attack/sweeps."""
    V = int(_resolve(args, cfgfile, "V", 1000, int))
    b = int(_resolve(args, cfgfile, "b", 64, int))
    c = _resolve(args, cfgfile, "c", DEFAULT_C)
    n = n if n is not None else int(_resolve(args, cfgfile, "n", DEFAULT_N, int))
    if d is None:
        d = getattr(args, "d", None)
        d = int(d) if d is not None else max(1, b // DEFAULT_DIM_RATIO)
    rng = RngHandle(seed)
    table = _random_table(V, b, rng.child(10))
    pp = proj.train_projection(table.rows, d, epochs=300, lr=2.0, rng=rng.child(11))
    if A is None:
        if mu is None:
            mu = getattr(args, "mu", None) or 10.0
        A = calib.A_of_mu(mu, c, n, d)
    params = MechanismParams(c=c, A=A, n=n, d=d)
    return pipeline.PipelineConfig(table, pp, params), rng


def cmd_gen_table(args, cfgfile):
    V = int(_resolve(args, cfgfile, "V", 256, int))
    b = int(_resolve(args, cfgfile, "b", 64, int))
    table = _random_table(V, b, RngHandle(args.seed))
    save_table(args.out, table)
    print(f"wrote table V={V} b={b} seed={args.seed} -> {args.out}")


def cmd_train_proj(args, cfgfile):
    table = load_table(args.table)
    d = args.d if args.d is not None else max(1, table.b // DEFAULT_DIM_RATIO)
    pp = proj.train_projection(table.rows, d, epochs=args.epochs, lr=args.lr,
                               rng=RngHandle(args.seed))
    proj.save_projection(args.out, pp)
    mse = proj.reconstruction_mse(table.rows, pp)
    print(f"wrote projection b={table.b} d={d} seed={args.seed} mse={mse:.6g} -> {args.out}")


def cmd_train_soft(args, cfgfile):
    table = load_table(args.table)
    pp = proj.load_projection(args.proj)
    c = _resolve(args, cfgfile, "c", DEFAULT_C)
    params = MechanismParams(c=c, A=args.A, n=args.n, d=pp.d)
    cfg = pipeline.PipelineConfig(table, pp, params)
    model = lm.tied_lm(table)
    corpus = lm.load_corpus(args.corpus)
    prompt = lm.tune_soft_prompt(model, cfg, corpus, r=args.r, epochs=args.epochs,
                                 lr=args.lr, rng=RngHandle(args.seed))
    lm.save_prompt(args.out, prompt)
    print(f"wrote soft prompt r={prompt.r} b={prompt.b} seed={args.seed} -> {args.out}")


def cmd_quantize(args, cfgfile):
    payload = wire.payload_size(args.T, args.d, args.n)
    frame = wire.frame_size(args.T, args.d, args.n)
    baseline = args.T * args.b * 4
    print(f"payload {payload} bytes")
    print(f"frame {frame} bytes")
    print(f"baseline {baseline} bytes (float32 {args.b}-dim embeddings)")
    print(f"compression {baseline / payload:.1f}x")
    if args.out:
        c = _resolve(args, cfgfile, "c", DEFAULT_C)
        rng = RngHandle(args.seed)
        v = rng.child(0).generator().uniform(-c, c, size=(args.T, args.d))
        params = MechanismParams(c=c, A=args.A, n=args.n, d=args.d)
        q = stochastic_quantize(v, params, rng.child(1))
        with open(args.out, "wb") as fh:
            fh.write(wire.pack(q))
        print(f"seed={args.seed} wrote frame -> {args.out}")


def cmd_accountant(args, cfgfile):
    c = _resolve(args, cfgfile, "c", DEFAULT_C)
    params = MechanismParams(c=c, A=args.A, n=args.n, d=args.d)
    mu = fdp.mu_of(params)
    gamma = fdp.gamma_of(params)
    var0 = args.d * args.A**2 / params.u
    sigma = math.sqrt((args.A**2 - c**2) / params.u)
    print(f"mu={mu:.5f}")
    print(f"gamma={gamma:.4f}")
    print(f"variance_at_zero={var0:.6g}")
    print(f"matched_sigma={sigma:.6g}")
    if gamma >= 0.5:
        print("warning: gamma >= 1/2, sandwich bound not meaningful")


def cmd_compose_check(args, cfgfile):
    c = _resolve(args, cfgfile, "c", DEFAULT_C)
    params = MechanismParams(c=c, A=args.A, n=args.n, d=args.d)
    m = params.u * args.d
    curve = fdp.compose_exact(c, args.A, m)
    mu, gamma = fdp.mu_of(params), fdp.gamma_of(params)
    lower = fdp.gdp_mu_curve_value(mu, curve.alphas + gamma) - gamma
    upper = fdp.gdp_mu_curve_value(mu, curve.alphas - gamma) + gamma
    ok = bool(np.all(curve.betas >= lower - 1e-9) and np.all(curve.betas <= upper + 1e-9))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(f"# splitdp compose-check v1 c={c} A={args.A} n={args.n} d={args.d}\n")
            fh.write("alpha,beta_exact,beta_lower,beta_upper\n")
            for a, b_, lo, hi in zip(curve.alphas, curve.betas, lower, upper):
                fh.write(f"{a:.17g},{b_:.17g},{lo:.17g},{hi:.17g}\n")
    print(f"m={m} mu={mu:.5f} gamma={gamma:.4f} sandwich={'ok' if ok else 'VIOLATED'}")
    return 0 if ok else 1


def cmd_calibrate(args, cfgfile):
    cfg, rng = _experiment(args, cfgfile, args.seed, n=args.n)
    gen = rng.child(20).generator()
    tokens = TokenSequence(gen.integers(0, cfg.table.V, size=args.tokens))
    result = calib.calibrate_to_asr(args.target, cfg, tokens, tol=args.tol,
                                    max_iters=args.max_iters, rng=rng.child(21))
    if args.out:
        calib.write_trace_csv(args.out, result, seed=args.seed)
    print(f"mu={result.mu:.6g} A={result.A:.6g} asr={result.asr:.4f} seed={args.seed}")


def cmd_attack(args, cfgfile):
    cfg, rng = _experiment(args, cfgfile, args.seed, mu=args.mu, A=args.A, n=args.n)
    gen = rng.child(20).generator()
    tokens = TokenSequence(gen.integers(0, cfg.table.V, size=args.tokens))
    q = pipeline.privatize_tokens(tokens, cfg, rng.child(21))
    if args.space == "latent":
        observed = dequantize(q)
        reference = attack.latent_reference(cfg.table, cfg.proj, cfg.params.c)
    else:
        observed = pipeline.reconstruct(q, cfg.proj)
        reference = cfg.table.rows
    report = attack.invert_embeddings(observed, reference, tokens,
                                      metric=args.metric, space=args.space)
    print(report.to_json())


def cmd_serve(args, cfgfile):
    table = load_table(args.table)
    pp = proj.load_projection(args.proj)
    prompt = lm.load_prompt(args.prompt) if args.prompt else lm.empty_prompt(table.b)
    artifacts = wire.ServerArtifacts(proj=pp, model=lm.tied_lm(table), prompt=prompt,
                                     gen_len=args.gen_len)
    print(f"serving on {args.host}:{args.port}")
    wire.serve_session(args.host, args.port, artifacts)


def cmd_client(args, cfgfile):
    table = load_table(args.table)
    pp = proj.load_projection(args.proj)
    c = _resolve(args, cfgfile, "c", DEFAULT_C)
    params = MechanismParams(c=c, A=args.A, n=args.n, d=pp.d)
    cfg = pipeline.PipelineConfig(table, pp, params)
    tokens = TokenSequence(int(x) for x in args.ids.split(","))
    ids = wire.client_round_trip(tokens, cfg, (args.host, args.port), RngHandle(args.seed))
    print(",".join(str(i) for i in ids))


def cmd_sweep_d(args, cfgfile):
    seed = args.seed
    V = int(_resolve(args, cfgfile, "V", 256, int))
    b = int(_resolve(args, cfgfile, "b", 64, int))
    c = _resolve(args, cfgfile, "c", DEFAULT_C)
    n = args.n
    d_list = [int(x) for x in args.d_list.split(",")]
    mu_list = [float(x) for x in args.mu_list.split(",")]
    rng = RngHandle(seed)
    table = _random_table(V, b, rng.child(10), rank=args.rank)
    model = lm.tied_lm(table, scale=args.logit_scale)
    corpus = _synth_corpus(model, args.seqs, args.T, rng.child(12), temperature=args.temperature)
    lines = [f"# splitdp sweep-d v1 seed={seed} V={V} b={b} c={c} n={n}", "d,mu,A,nll,ppl"]
    results = {}
    for d in d_list:
        pp = proj.train_projection(table.rows, d, epochs=300, lr=2.0, rng=rng.child(11))
        for mu in mu_list:
            A = calib.A_of_mu(mu, c, n, d)
            cfg = pipeline.PipelineConfig(table, pp, MechanismParams(c=c, A=A, n=n, d=d))
            nll = _eval_nll(model, lm.empty_prompt(b), cfg, corpus, rng.child(13))
            results[(d, mu)] = nll
            lines.append(f"{d},{mu:.17g},{A:.17g},{nll:.17g},{math.exp(nll):.17g}")
    out = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out + "\n")
    print(out)
    return results


def cmd_sweep_mu(args, cfgfile):
    seed = args.seed
    V = int(_resolve(args, cfgfile, "V", 256, int))
    b = int(_resolve(args, cfgfile, "b", 64, int))
    c = _resolve(args, cfgfile, "c", DEFAULT_C)
    n = args.n
    d = args.d if args.d is not None else max(1, b // DEFAULT_DIM_RATIO)
    mu_list = [float(x) for x in args.mu_list.split(",")]
    rng = RngHandle(seed)
    table = _random_table(V, b, rng.child(10), rank=args.rank)
    pp = proj.train_projection(table.rows, d, epochs=300, lr=2.0, rng=rng.child(11))
    model = lm.tied_lm(table, scale=args.logit_scale)
    corpus = _synth_corpus(model, args.seqs, args.T, rng.child(12), temperature=args.temperature)
    lines = [
        f"# splitdp sweep-mu v1 seed={seed} V={V} b={b} d={d} c={c} n={n} r={args.r}",
        "mu,A,nll_no_prompt,ppl_no_prompt,nll_prompt,ppl_prompt,asr,cosine",
    ]
    for i, mu in enumerate(mu_list):
        A = calib.A_of_mu(mu, c, n, d)
        cfg = pipeline.PipelineConfig(table, pp, MechanismParams(c=c, A=A, n=n, d=d))
        no_prompt = lm.empty_prompt(b)
        nll0 = _eval_nll(model, no_prompt, cfg, corpus, rng.child(13))
        prompt = lm.tune_soft_prompt(model, cfg, corpus, r=args.r, epochs=args.epochs,
                                     lr=args.lr, rng=rng.child(100 + i))
        nll1 = _eval_nll(model, prompt, cfg, corpus, rng.child(13))
        gen = rng.child(14).generator()
        tokens = TokenSequence(gen.integers(0, V, size=args.tokens))
        asr, _ = calib.measure_asr(mu, cfg, tokens, rng.child(15 + i))
        cos = _mean_cosine(cfg, corpus, rng.child(16))
        lines.append(
            f"{mu:.17g},{A:.17g},{nll0:.17g},{math.exp(nll0):.17g},"
            f"{nll1:.17g},{math.exp(nll1):.17g},{asr:.17g},{cos:.17g}"
        )
    out = "\n".join(lines)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out + "\n")
    print(out)


def cmd_report(args, cfgfile):
    summary = {}
    for path in args.inputs:
        cols = {}
        with open(path) as fh:
            header = None
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if header is None:
                    header = parts
                    cols = {h: [] for h in header}
                    continue
                for h, v in zip(header, parts):
                    try:
                        cols[h].append(float(v))
                    except ValueError:
                        pass
        summary[path] = {h: float(np.mean(v)) for h, v in cols.items() if v}
        if "cosine" in summary[path]:
            summary.setdefault("mean_cosine_similarity", summary[path]["cosine"])
    text = json.dumps(summary, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitdp", description=__doc__)
    p.add_argument("--config", help="key=value config file (flags take precedence)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(fn=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("gen-table", cmd_gen_table, help="generate a random embedding table")
    sp.add_argument("--V", type=int)
    sp.add_argument("--b", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train-proj", cmd_train_proj, help="train the encoder/decoder pair")
    sp.add_argument("--table", required=True)
    sp.add_argument("--d", type=int)
    sp.add_argument("--epochs", type=int, default=500)
    sp.add_argument("--lr", type=float, default=2.0)
    sp.add_argument("--out", required=True)

    sp = add("train-soft", cmd_train_soft, help="tune a soft prompt")
    sp.add_argument("--table", required=True)
    sp.add_argument("--proj", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--c", type=float)
    sp.add_argument("--A", type=float, required=True)
    sp.add_argument("--n", type=int, default=DEFAULT_N)
    sp.add_argument("--r", type=int, default=DEFAULT_R)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--lr", type=float, default=1.0)
    sp.add_argument("--out", required=True)

    sp = add("quantize", cmd_quantize, help="report frame sizes, optionally write a frame")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--T", type=int, required=True)
    sp.add_argument("--b", type=int, default=4096)
    sp.add_argument("--c", type=float)
    sp.add_argument("--A", type=float, default=0.13)
    sp.add_argument("--out")

    sp = add("accountant", cmd_accountant, help="print mu, gamma, variance, matched sigma")
    sp.add_argument("--c", type=float)
    sp.add_argument("--A", type=float, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--d", type=int, required=True)

    sp = add("compose-check", cmd_compose_check, help="exact curve vs sandwich bound")
    sp.add_argument("--c", type=float)
    sp.add_argument("--A", type=float, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--out")

    sp = add("calibrate", cmd_calibrate, help="binary-search mu to a target ASR")
    sp.add_argument("--target", type=float, required=True)
    sp.add_argument("--tol", type=float, default=0.01)
    sp.add_argument("--max-iters", type=int, default=40)
    sp.add_argument("--tokens", type=int, default=10000)
    sp.add_argument("--V", type=int)
    sp.add_argument("--b", type=int)
    sp.add_argument("--c", type=float)
    sp.add_argument("--d", type=int)
    sp.add_argument("--n", type=int, default=DEFAULT_N)
    sp.add_argument("--out")

    sp = add("attack", cmd_attack, help="run the embedding inversion attack")
    sp.add_argument("--tokens", type=int, default=10000)
    sp.add_argument("--V", type=int)
    sp.add_argument("--b", type=int)
    sp.add_argument("--c", type=float)
    sp.add_argument("--d", type=int)
    sp.add_argument("--n", type=int, default=DEFAULT_N)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--A", type=float)
    sp.add_argument("--metric", choices=attack.METRICS, default="cosine")
    sp.add_argument("--space", choices=("latent", "embedding"), default="latent")

    sp = add("serve", cmd_serve, help="run the inference session server")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, required=True)
    sp.add_argument("--table", required=True)
    sp.add_argument("--proj", required=True)
    sp.add_argument("--prompt")
    sp.add_argument("--gen-len", type=int, default=8)

    sp = add("client", cmd_client, help="privatize tokens and query a server")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, required=True)
    sp.add_argument("--ids", required=True)
    sp.add_argument("--table", required=True)
    sp.add_argument("--proj", required=True)
    sp.add_argument("--c", type=float)
    sp.add_argument("--A", type=float, required=True)
    sp.add_argument("--n", type=int, default=DEFAULT_N)

    sp = add("sweep-d", cmd_sweep_d, help="NLL across latent dimensions and privacy levels")
    sp.add_argument("--d-list", required=True)
    sp.add_argument("--mu-list", required=True)
    sp.add_argument("--V", type=int)
    sp.add_argument("--b", type=int)
    sp.add_argument("--c", type=float)
    sp.add_argument("--n", type=int, default=DEFAULT_N)
    sp.add_argument("--T", type=int, default=32)
    sp.add_argument("--seqs", type=int, default=16)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--logit-scale", type=float, default=1.0)
    sp.add_argument("--temperature", type=float, default=0.3)
    sp.add_argument("--out")

    sp = add("sweep-mu", cmd_sweep_mu, help="NLL/PPL, ASR, cosine vs mu with/without prompt")
    sp.add_argument("--mu-list", required=True)
    sp.add_argument("--V", type=int)
    sp.add_argument("--b", type=int)
    sp.add_argument("--c", type=float)
    sp.add_argument("--d", type=int)
    sp.add_argument("--n", type=int, default=DEFAULT_N)
    sp.add_argument("--r", type=int, default=DEFAULT_R)
    sp.add_argument("--T", type=int, default=32)
    sp.add_argument("--seqs", type=int, default=16)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--lr", type=float, default=1.0)
    sp.add_argument("--tokens", type=int, default=2000)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--logit-scale", type=float, default=1.0)
    sp.add_argument("--temperature", type=float, default=0.3)
    sp.add_argument("--out")

    sp = add("report", cmd_report, help="aggregate CSVs into a summary JSON")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out")

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfgfile = _load_config(args.config)
    try:
        rc = args.fn(args, cfgfile)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return rc if isinstance(rc, int) else 0


if __name__ == "__main__":
    sys.exit(main())
