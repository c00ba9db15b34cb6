"""Compiled evaluation kernels for the expanded coefficient dynamics.

The projected right-hand side is a fixed list of multiply-accumulate
instructions over coefficient blocks; these loops dominate every
integration and are JIT-compiled.  All kernels are single-threaded and
accumulate in a fixed order so results are bit-reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def products_eval(x, prod_ptr, prod_off1, prod_off2, ins_a, ins_b, ins_out, ins_val, pv):
    """Evaluate every unique product contraction into pv (n_products, n_terms).

    prod_off1/prod_off2 are coefficient-block offsets into x; -1 marks an
    absent factor (linear or constant products).
    """
    pv[:, :] = 0.0
    n_products = prod_ptr.shape[0] - 1
    for p in range(n_products):
        o1 = prod_off1[p]
        o2 = prod_off2[p]
        if o2 >= 0:
            for i in range(prod_ptr[p], prod_ptr[p + 1]):
                pv[p, ins_out[i]] += ins_val[i] * x[o1 + ins_a[i]] * x[o2 + ins_b[i]]
        elif o1 >= 0:
            for i in range(prod_ptr[p], prod_ptr[p + 1]):
                pv[p, ins_out[i]] += ins_val[i] * x[o1 + ins_a[i]]
        else:
            for i in range(prod_ptr[p], prod_ptr[p + 1]):
                pv[p, ins_out[i]] += ins_val[i]


@njit(cache=True)
def assemble_groups(pv, asm_row_off, asm_prod, asm_w, asm_group, fg):
    """Accumulate weighted product vectors into per-input-group blocks."""
    fg[:, :] = 0.0
    n_terms = pv.shape[1]
    for e in range(asm_prod.shape[0]):
        g = asm_group[e]
        p = asm_prod[e]
        w = asm_w[e]
        ro = asm_row_off[e]
        for k in range(n_terms):
            fg[g, ro + k] += w * pv[p, k]


@njit(cache=True)
def jac_fill(x, sig, f_slot, f_val, f_gather, f_group, data):
    """Fill CSR value array of the state Jacobian for the current (x, u)."""
    data[:] = 0.0
    for e in range(f_slot.shape[0]):
        v = sig[f_group[e]] * f_val[e]
        g = f_gather[e]
        if g >= 0:
            v *= x[g]
        data[f_slot[e]] += v


@njit(cache=True)
def csr_matvec_multi(indptr, indices, data, S, out):
    """out = CSR(data) @ S for a dense matrix S of sensitivity columns."""
    n_rows = indptr.shape[0] - 1
    n_cols = S.shape[1]
    for r in range(n_rows):
        for c in range(n_cols):
            out[r, c] = 0.0
        for i in range(indptr[r], indptr[r + 1]):
            a = data[i]
            col = indices[i]
            for c in range(n_cols):
                out[r, c] += a * S[col, c]
