# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled retrieval scoring kernels: BM25 postings accumulation and the
contiguous phrase scan. Semantics match tablefill._kernels._fallback."""


def bm25_accumulate(double[::1] scores, const int[::1] passage_idxs,
                    const double[::1] tfs, const double[::1] doc_lens,
                    double idf, double k1, double b, double avg_len):
    cdef Py_ssize_t i, n = passage_idxs.shape[0]
    cdef int p
    cdef double tf, norm
    for i in range(n):
        p = passage_idxs[i]
        tf = tfs[i]
        norm = tf + k1 * (1.0 - b + b * doc_lens[p] / avg_len)
        scores[p] += idf * (tf * (k1 + 1.0) / norm)


def phrase_occurs(const int[::1] tokens, const int[::1] phrase):
    cdef Py_ssize_t n = tokens.shape[0]
    cdef Py_ssize_t m = phrase.shape[0]
    cdef Py_ssize_t i, j
    cdef bint hit
    if m == 0 or m > n:
        return False
    for i in range(n - m + 1):
        if tokens[i] == phrase[0]:
            hit = True
            for j in range(1, m):
                if tokens[i + j] != phrase[j]:
                    hit = False
                    break
            if hit:
                return True
    return False
