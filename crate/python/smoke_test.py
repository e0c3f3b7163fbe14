"""Smoke test for the Python bindings.

Build and stage the module first:

    cargo build -p auglin-py --release --features extension-module
    cp target/release/libauglin_py.so python/auglin.so
    python3 python/smoke_test.py
"""

import math
import os
import random
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import auglin  # noqa: E402


def rand_rows(rng, n, d):
    return [[rng.uniform(-1, 1) for _ in range(d)] for _ in range(n)]


def max_diff(a, b):
    return max(abs(x - y) for ra, rb in zip(a, b) for x, y in zip(ra, rb))


def main():
    rng = random.Random(0)
    n, d = 20, 4
    cfg = auglin.AttnConfig(head_dim=d, group_size=4, conv_kernel=3, alpha=0.5)
    q, k, v = (rand_rows(rng, n, d) for _ in range(3))
    taps = rand_rows(rng, 3, d)

    batched = auglin.augmented_attention(q, k, v, taps, cfg)
    assert len(batched) == n and len(batched[0]) == d
    assert all(math.isfinite(x) for row in batched for x in row)

    # Streaming matches the batched pass.
    state = auglin.DecodeState(cfg, taps)
    streamed = [state.step(q[t], k[t], v[t]) for t in range(n)]
    assert max_diff(batched, streamed) < 1e-10
    assert state.pos == n and state.folded == 20

    # With one group covering everything and no conv, only local softmax is left.
    plain = auglin.AttnConfig(head_dim=d, group_size=n, conv_kernel=1, alpha=0.0)
    zero_taps = [[0.0] * d]
    ref = auglin.softmax_attention(q, k, v, causal=True)
    assert max_diff(auglin.augmented_attention(q, k, v, zero_taps, plain), ref) < 1e-12

    glob = auglin.grouped_global_attention(q, k, v, 1, "relu", "inverse_count")
    assert glob[0] == [0.0] * d

    try:
        auglin.AttnConfig(head_dim=d, group_size=0, conv_kernel=3)
    except ValueError:
        pass
    else:
        raise AssertionError("group_size=0 accepted")

    parents = auglin.parse_tree("2,2")
    assert parents == [None, None, 0, 0, 1, 1]
    accepted, bonus = auglin.verify_tree(parents, [5, 6, 7, 8, 9, 10], [9, 9, 3, 3, 3, 3], 5)
    assert accepted == [0] and bonus == 9

    model = auglin.ToyModel(vocab_size=12, d_model=16, n_heads=2, n_layers=2, group_size=4, conv_kernel=3, seed=1)
    prompt = [1, 2, 3, 4, 5]
    assert len(model.logits(prompt)) == len(prompt)
    greedy = model.generate(prompt, 15)
    spec, mean_accepted = model.generate_speculative(prompt, 15, tree="3,2,2")
    assert spec == greedy, (spec, greedy)
    spec_random, _ = model.generate_speculative(prompt, 15, tree="2,2", drafter="random", seed=3)
    assert spec_random == greedy
    print(f"ok: greedy {greedy}, mean accepted drafts per round {mean_accepted:.2f}")


if __name__ == "__main__":
    main()
