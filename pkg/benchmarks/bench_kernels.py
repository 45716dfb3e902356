#!/usr/bin/env python3
"""Compare the compiled scoring kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--quick]

Build the extension first (pip install -e . --no-build-isolation, or
python setup.py build_ext --inplace); without it only the fallback runs.
"""

import argparse
import time

import numpy as np

from tablefill._kernels import _fallback

try:
    from tablefill._kernels import _scoring as native
except ImportError:
    native = None


def synth_index(rng, n_passages, n_terms, postings_per_term):
    doc_lens = rng.integers(40, 160, size=n_passages).astype(np.float64)
    avg_len = float(doc_lens.mean())
    postings = []
    for _ in range(n_terms):
        k = min(postings_per_term, n_passages)
        idxs = np.sort(rng.choice(n_passages, size=k, replace=False)).astype(np.intc)
        tfs = rng.integers(1, 5, size=k).astype(np.float64)
        postings.append((idxs, tfs))
    return doc_lens, avg_len, postings


def bench_accumulate(impl, postings, doc_lens, avg_len, n_passages, rounds):
    scores = np.zeros(n_passages)
    t0 = time.perf_counter()
    for _ in range(rounds):
        scores[:] = 0.0
        for idxs, tfs in postings:
            impl.bm25_accumulate(scores, idxs, tfs, doc_lens, 1.7, 1.2, 0.75, avg_len)
    elapsed = time.perf_counter() - t0
    total_postings = rounds * sum(idxs.shape[0] for idxs, _ in postings)
    return elapsed, total_postings / elapsed, scores


def bench_phrases(impl, token_arrays, phrases, rounds):
    t0 = time.perf_counter()
    hits = 0
    for _ in range(rounds):
        for tokens in token_arrays:
            for phrase in phrases:
                hits += impl.phrase_occurs(tokens, phrase)
    elapsed = time.perf_counter() - t0
    scans = rounds * len(token_arrays) * len(phrases)
    return elapsed, scans / elapsed, hits


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="smaller workload")
    args = parser.parse_args()

    rng = np.random.default_rng(1234)
    scale = 0.2 if args.quick else 1.0
    n_passages = int(40_000 * scale) or 1000
    n_terms = 400
    postings_per_term = int(2_000 * scale) or 100
    rounds = 3

    doc_lens, avg_len, postings = synth_index(rng, n_passages, n_terms, postings_per_term)
    token_arrays = [
        rng.integers(0, 5_000, size=rng.integers(60, 140)).astype(np.intc)
        for _ in range(int(2_000 * scale) or 200)
    ]
    phrases = [rng.integers(0, 5_000, size=n).astype(np.intc) for n in (1, 2, 3)]

    print(f"workload: {n_passages} passages, {n_terms} terms x {postings_per_term} postings")
    impls = [("fallback", _fallback)]
    if native is not None:
        impls.append(("native", native))
    else:
        print("note: compiled extension not built; showing fallback only")

    results = {}
    for name, impl in impls:
        acc_s, acc_rate, scores = bench_accumulate(
            impl, postings, doc_lens, avg_len, n_passages, rounds
        )
        ph_s, ph_rate, hits = bench_phrases(impl, token_arrays, phrases, rounds)
        results[name] = (scores, acc_rate, ph_rate)
        print(
            f"{name:>9}: bm25 {acc_rate / 1e6:8.1f} M postings/s ({acc_s:.3f}s) | "
            f"phrase {ph_rate / 1e3:8.1f} K scans/s ({ph_s:.3f}s)"
        )

    if native is not None:
        f_scores, f_acc, f_ph = results["fallback"]
        n_scores, n_acc, n_ph = results["native"]
        if not np.array_equal(f_scores, n_scores):
            raise SystemExit("backend scores diverged; parity broken")
        print(f"parity: scores bit-identical")
        print(f"speedup: bm25 x{n_acc / f_acc:.2f}, phrase x{n_ph / f_ph:.2f}")


if __name__ == "__main__":
    main()
