"""Benchmark the compiled kernel core against the pure-Python fallback.

Times the fused train forward+backward and the eval forward at the real
model sizes, checks that both backends agree bit for bit on the benchmark
inputs, and prints a per-step comparison::

    python -m crossad.bench [--batch 32] [--iters 200]
"""

from __future__ import annotations

import argparse
import time

from . import kernels
from .net import ModelConfig, init_params
from .rng import RandomStream


def _args_for(config: ModelConfig, batch: int, seed: int):
    params = init_params(config, seed)
    stream = RandomStream(seed + 1)
    for _, arr in params.learnables():
        arr += 0.2 * (2.0 * stream.uniform(arr.shape) - 1.0)
    x = 4.0 * stream.uniform((batch, config.seq_len, config.input_dim)) - 2.0
    return params, x


def _time_train(backend, params, x, config: ModelConfig, iters: int) -> float:
    go = 2.0 * RandomStream(7).uniform((x.shape[0], config.output_dim)) - 1.0
    sigmoid = config.output_dim == 1

    def once(counter):
        out, cache, _, _, n = backend.forward_train(
            x, params.bn_gamma, params.bn_beta, params.proj_weight,
            params.proj_bias, params.attn_w1, params.attn_b1, params.attn_w2,
            params.attn_b2, params.out_weight, params.out_bias,
            config.dropout_rate, sigmoid, 1234, counter)
        backend.backward(cache, params.proj_weight, params.attn_w1,
                         params.attn_w2, params.out_weight,
                         config.dropout_rate, sigmoid, go)
        return n

    counter = once(0)  # warmup
    start = time.perf_counter()
    c = counter
    for _ in range(iters):
        c += once(c)
    return (time.perf_counter() - start) / iters


def _time_eval(backend, params, x, config: ModelConfig, iters: int) -> float:
    def once():
        backend.forward_eval(
            x, params.bn_gamma, params.bn_beta, params.bn_running_mean,
            params.bn_running_var, params.proj_weight, params.proj_bias,
            params.attn_w1, params.attn_b1, params.attn_w2, params.attn_b2,
            params.out_weight, params.out_bias, config.output_dim == 1)

    once()
    start = time.perf_counter()
    for _ in range(iters):
        once()
    return (time.perf_counter() - start) / iters


def _agreement(backends, params, x, config: ModelConfig) -> bool:
    outs = []
    for backend in backends.values():
        out, cache, _, _, _ = backend.forward_train(
            x, params.bn_gamma, params.bn_beta, params.proj_weight,
            params.proj_bias, params.attn_w1, params.attn_b1, params.attn_w2,
            params.attn_b2, params.out_weight, params.out_bias,
            config.dropout_rate, config.output_dim == 1, 99, 0)
        outs.append((out.tobytes(), cache["w"].tobytes()))
    return all(o == outs[0] for o in outs)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--iters", type=int, default=200)
    args = parser.parse_args(argv)

    backends = {"pure": kernels.get("pure")}
    if kernels.has_compiled():
        backends["compiled"] = kernels.get("compiled")
    else:
        print("compiled core not built (python setup.py build_ext --inplace); "
              "timing the pure backend only")

    variants = {
        "detection (28->12->2)": ModelConfig(28, 12, 2),
        "regression (29->8->1)": ModelConfig(29, 8, 1),
    }
    print(f"batch={args.batch} iters={args.iters} active={kernels.backend_name()}")
    for label, config in variants.items():
        params, x = _args_for(config, args.batch, seed=5)
        if len(backends) > 1 and not _agreement(backends, params, x, config):
            print(f"{label}: BACKEND MISMATCH -- results are not bit-identical")
            return 1
        rows = {}
        for name, backend in backends.items():
            train = _time_train(backend, params, x, config, args.iters)
            ev = _time_eval(backend, params, x, config, args.iters)
            rows[name] = (train, ev)
        print(f"\n{label}")
        for name, (train, ev) in rows.items():
            print(f"  {name:>9}: train {train * 1e3:8.3f} ms/step   "
                  f"eval {ev * 1e3:8.3f} ms/step")
        if "compiled" in rows:
            speed = rows["pure"][0] / rows["compiled"][0]
            print(f"  speedup (train): {speed:.1f}x, bit-identical results")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
