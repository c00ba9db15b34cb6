"""Galerkin projection of polynomial ODE systems onto a chaos basis.

A model whose right-hand side is a sum of terms ``c * prod_l x_l^gamma_l *
sigma_u(u) * sigma_p(p)`` is transformed into deterministic dynamics for the
expansion coefficients of every state.  The required inner products of basis
polynomials are computed exactly by Gauss quadrature, exploiting the product
structure across independent random variables, and stored sparsely; the
projected right-hand side is precompiled into a flat multiply-accumulate
instruction list because it is evaluated thousands of times per optimization.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from . import kernels
from .basis import GAUSSIAN, OrthoBasis, PCExpansion, fit_function

DROP_TOL = 1e-12


@dataclass(frozen=True)
class InputFunction:
    """Scalar input dependence of a model term, with its gradient in u."""

    fn: object
    grad: object

    def __call__(self, u):
        return self.fn(u)


CONST_INPUT = InputFunction(fn=lambda u: 1.0, grad=lambda u: np.zeros(np.shape(u)))


@dataclass(frozen=True)
class Monomial:
    """One separable model term: coeff * prod x^gamma * sigma_u(u) * sigma_p(p)."""

    coeff: float
    exponents: tuple
    input_id: str = None
    param_id: str = None

    @property
    def state_degree(self):
        return int(sum(self.exponents))


class PolynomialOde:
    """Polynomial-in-the-states ODE with PCE parameters and input functions.

    Parameters
    ----------
    terms : list of lists of Monomial
        ``terms[i]`` are the monomials of d x_i / dt.
    inputs : dict mapping input_id -> InputFunction
    params : dict mapping param_id -> PCExpansion
    """

    def __init__(self, n_x, n_u, terms, inputs=None, params=None, state_names=None,
                 d_max=None):
        self.n_x = n_x
        self.n_u = n_u
        self.terms = terms
        self.inputs = dict(inputs or {})
        self.params = dict(params or {})
        self.state_names = state_names or [f"x{i+1}" for i in range(n_x)]
        if len(terms) != n_x:
            raise ValueError("need one term list per state")
        deg = 0
        for tl in terms:
            for mono in tl:
                if len(mono.exponents) != n_x:
                    raise ValueError("monomial exponent vector has wrong length")
                if min(mono.exponents) < 0:
                    raise ValueError("monomial exponents must be non-negative")
                if mono.input_id is not None and mono.input_id not in self.inputs:
                    raise ValueError(f"unknown input function {mono.input_id!r}")
                if mono.param_id is not None and mono.param_id not in self.params:
                    raise ValueError(f"unknown parameter {mono.param_id!r}")
                deg = max(deg, mono.state_degree)
        self.degree = deg
        if d_max is not None and deg > d_max:
            raise ValueError(f"model degree {deg} exceeds configured maximum {d_max}")

    def _input_value(self, mono, u):
        if mono.input_id is None:
            return 1.0
        return self.inputs[mono.input_id].fn(u)

    def param_means(self):
        return {k: float(e.coeffs[0]) for k, e in self.params.items()}

    def rhs_with_params(self, t, x, u, param_values):
        """Plain (unexpanded) right-hand side for given parameter values."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(self.n_x)
        for i, tl in enumerate(self.terms):
            acc = 0.0
            for mono in tl:
                v = mono.coeff
                for l, g in enumerate(mono.exponents):
                    if g:
                        v *= x[l] ** g
                v *= self._input_value(mono, u)
                if mono.param_id is not None:
                    v *= param_values[mono.param_id]
                acc += v
            out[i] = acc
        return out

    def nominal_rhs(self, t, x, u):
        """Right-hand side at the parameter means."""
        return self.rhs_with_params(t, x, u, self.param_means())

    def to_json_dict(self):
        return {
            "n_x": self.n_x,
            "n_u": self.n_u,
            "state_names": list(self.state_names),
            "terms": [
                [
                    {
                        "coeff": m.coeff,
                        "exponents": list(m.exponents),
                        "input_id": m.input_id,
                        "param_id": m.param_id,
                    }
                    for m in tl
                ]
                for tl in self.terms
            ],
            "params": {k: e.to_json_dict() for k, e in self.params.items()},
            "input_ids": sorted(self.inputs),
        }

    @classmethod
    def from_json_dict(cls, d, inputs):
        terms = [
            [
                Monomial(
                    coeff=m["coeff"],
                    exponents=tuple(m["exponents"]),
                    input_id=m["input_id"],
                    param_id=m["param_id"],
                )
                for m in tl
            ]
            for tl in d["terms"]
        ]
        params = {k: PCExpansion.from_json_dict(e) for k, e in d["params"].items()}
        return cls(d["n_x"], d["n_u"], terms, inputs=inputs, params=params,
                   state_names=d["state_names"])


def _gauss_rule(family, n_nodes):
    if family == GAUSSIAN:
        x, w = hermegauss(n_nodes)
        return x, w / np.sqrt(2.0 * np.pi)
    x, w = leggauss(n_nodes)
    return x, w / 2.0


def _univariate_products(family, order, n_factors):
    """Exact table of E[prod_i Phi^{m_i}] for all degree tuples up to `order`.

    Gauss quadrature with ceil((n_factors*order)/2)+1 nodes integrates the
    degree n_factors*order integrand exactly.
    """
    n_nodes = int(np.ceil(n_factors * order / 2)) + 1
    x, w = _gauss_rule(family, n_nodes)
    from .basis import _vander

    v = _vander(family, x, order)  # (n_nodes, order+1)
    table = np.ones((n_nodes,) + (1,) * n_factors) * w.reshape((-1,) + (1,) * n_factors)
    for f in range(n_factors):
        shape = [n_nodes] + [1] * n_factors
        shape[1 + f] = order + 1
        table = table * v.reshape(shape)
    return table.sum(axis=0)


class ProjectionTensor:
    """Sparse tables of normalized basis product integrals.

    ``tables[d]`` holds entries ``E[Psi_{i1}...Psi_{id} Psi_out]/E[Psi_out^2]``
    as index arrays ``idx`` (nnz, d) with ``idx[:, :-?]`` understood
    symmetrically, an output array and values.  The first slot of tables with
    d >= 3 may be restricted to multi-indices of low total degree (enough for
    affine parameter expansions); the cap is recorded in the metadata.
    Entries smaller than the drop tolerance are treated as structural zeros
    and not stored.
    """

    def __init__(self, basis, d_max, tables, metadata):
        self.basis = basis
        self.d_max = d_max
        self.tables = tables
        self.metadata = metadata

    def value(self, args, out):
        """Look up one entry (test accessor); `args` order is irrelevant."""
        d = len(args)
        idx, outs, vals = self.tables[d]
        cap = self.metadata["first_slot_cap"] if d >= 3 else None
        degs = [int(self.basis.index_set.degrees()[a]) for a in args]
        order = np.argsort(degs, kind="stable")
        sorted_args = [args[i] for i in order]
        if cap is not None and degs[order[0]] > cap:
            raise KeyError("first-slot degree exceeds the built cap")
        if d >= 3:
            key = tuple(sorted_args[:1] + sorted(sorted_args[1:]))
        else:
            key = tuple(sorted(sorted_args))
        mask = np.all(idx == np.array(key), axis=1) & (outs == out)
        hit = np.flatnonzero(mask)
        if hit.size == 0:
            return 0.0
        return float(vals[hit[0]])


def _ordered_entries(idx, outs, vals):
    """Expand canonically stored symmetric pairs into all ordered pairs."""
    a, b = idx[:, 0], idx[:, 1]
    off = a != b
    oa = np.concatenate([a, b[off]])
    ob = np.concatenate([b, a[off]])
    oo = np.concatenate([outs, outs[off]])
    ov = np.concatenate([vals, vals[off]])
    return oa, ob, oo, ov


def _join_tables(basis, slot_caps, uni):
    """Enumerate nonzero product integrals one dimension at a time.

    Entries for all factor combinations are grown as flat arrays: each step
    joins the current partial entries with the nonzero univariate integrals
    of the next dimension and prunes on the per-slot total-degree caps.
    Factor degree vectors are packed two bits per dimension, canonical order
    (sorted descending) is enforced on the uncapped slots at the end.
    """
    P = basis.order
    n_xi = basis.n_xi
    n_slots = len(slot_caps)  # factors including the output slot (last)
    if P > 3:
        shift = int(np.ceil(np.log2(P + 1)))
    else:
        shift = 2
    codes = np.zeros((1, n_slots), dtype=np.int64)
    totals = np.zeros((1, n_slots), dtype=np.int64)
    vals = np.ones(1)
    for j in range(n_xi):
        tab = uni[(basis.families[j], n_slots)]
        combos = np.argwhere(np.abs(tab) > 0.0)  # (m, n_slots) degree tuples
        cvals = tab[tuple(combos.T)]
        keep = np.ones(len(combos), dtype=bool)
        for s, cap in enumerate(slot_caps):
            keep &= combos[:, s] <= cap
        combos, cvals = combos[keep], cvals[keep]
        n_old, n_new = len(vals), len(combos)
        codes = np.repeat(codes, n_new, axis=0) + np.tile(
            combos.astype(np.int64) << (shift * j), (n_old, 1)
        )
        totals = np.repeat(totals, n_new, axis=0) + np.tile(combos, (n_old, 1))
        vals = np.repeat(vals, n_new) * np.tile(cvals, n_old)
        keep = np.ones(len(vals), dtype=bool)
        for s, cap in enumerate(slot_caps):
            keep &= totals[:, s] <= cap
        keep &= np.abs(vals) > DROP_TOL
        codes, totals, vals = codes[keep], totals[keep], vals[keep]
    return codes, vals, shift


def build_tensors(basis, d_max, first_slot_cap=None):
    """Precompute all projection tables for products of up to d_max factors.

    This is a one-time offline step per model.  ``first_slot_cap`` limits the
    total degree of the first factor in tables with three or more slots
    (default: the order of any parameter expansion it will be contracted
    with, i.e. the full basis order).
    """
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    P = basis.order
    n_xi = basis.n_xi
    idx = basis.index_set.indices
    n_terms = basis.n_terms
    if first_slot_cap is None:
        first_slot_cap = P
    # guard against absurd quadrature sizes
    n_nodes = int(np.ceil((d_max + 1) * P / 2)) + 1
    if n_nodes > 10_000:
        raise ValueError("quadrature node count overflow; reduce d_max or order")

    uni = {}  # (family, n_factors) -> dense table of E[prod Phi^{m_i}]
    for fam in set(basis.families):
        for f in range(2, d_max + 2):
            uni[(fam, f)] = _univariate_products(fam, P, f)

    shift = 2 if P <= 3 else int(np.ceil(np.log2(P + 1)))
    packed = (idx.astype(np.int64) << (shift * np.arange(n_xi))).sum(axis=1)
    code_to_index = {int(c): k for k, c in enumerate(packed)}
    degs = idx.sum(axis=1)

    def decode(codes_col):
        return np.array([code_to_index[int(c)] for c in codes_col], dtype=np.int32)

    tables = {}
    ones = np.arange(n_terms, dtype=np.int32)
    tables[1] = (ones.reshape(-1, 1), ones.copy(), np.ones(n_terms))

    if d_max >= 2:
        codes, vals, _ = _join_tables(basis, (P, P, P), uni)
        b, c, o = (decode(codes[:, s]) for s in range(3))
        canon = b <= c
        bb, cc, oo = b[canon], c[canon], o[canon]
        vv = vals[canon] / basis.norms[oo]
        keep = np.abs(vv) > DROP_TOL
        tables[2] = (
            np.column_stack([bb[keep], cc[keep]]).astype(np.int32),
            oo[keep].astype(np.int32),
            vv[keep],
        )
    for d in range(3, d_max + 1):
        if d > 3:
            raise NotImplementedError(
                "tables with more than three slots are not built; lift the model"
            )
        codes, vals, _ = _join_tables(basis, (first_slot_cap, P, P, P), uni)
        a, b, c, o = (decode(codes[:, s]) for s in range(4))
        canon = b <= c
        aa, bb, cc, oo = a[canon], b[canon], c[canon], o[canon]
        vv = vals[canon] / basis.norms[oo]
        keep = np.abs(vv) > DROP_TOL
        tables[3] = (
            np.column_stack([aa[keep], bb[keep], cc[keep]]).astype(np.int32),
            oo[keep].astype(np.int32),
            vv[keep],
        )

    n_capped = int(np.sum(degs <= first_slot_cap))
    total = {d: float(n_terms) ** (d + 1) for d in tables}
    if 3 in tables:
        total[3] = float(n_capped) * float(n_terms) ** 3
    metadata = {
        "drop_tol": DROP_TOL,
        "first_slot_cap": first_slot_cap,
        "nodes_per_dim": n_nodes,
        "sparsity": {
            d: 1.0 - (2 * len(t[2]) if d >= 2 else len(t[2])) / total[d]
            for d, t in tables.items()
        },
    }
    return ProjectionTensor(basis=basis, d_max=d_max, tables=tables, metadata=metadata)


def _contract_param(tensor, pcoeffs):
    """Contract a parameter coefficient vector into the three-slot table.

    Returns ordered (b, c, out, val) arrays of the effective two-slot tensor.
    """
    idx, outs, vals = tensor.tables[3]
    a = idx[:, 0]
    w = pcoeffs[a]
    keep = w != 0.0
    b, c, o = idx[keep, 1], idx[keep, 2], outs[keep]
    v = vals[keep] * w[keep]
    # combine duplicate (b, c, out) coordinates across parameter indices
    n = tensor.basis.n_terms
    key = (b.astype(np.int64) * n + c) * n + o
    order = np.argsort(key, kind="stable")
    key, b, c, o, v = key[order], b[order], c[order], o[order], v[order]
    uk, start = np.unique(key, return_index=True)
    sums = np.add.reduceat(v, start)
    b, c, o = b[start], c[start], o[start]
    keep = np.abs(sums) > DROP_TOL
    return _ordered_entries(
        np.column_stack([b[keep], c[keep]]).astype(np.int32),
        o[keep].astype(np.int32),
        sums[keep],
    )


@dataclass
class _Product:
    src1: int  # state index, or -1 absent
    src2: int  # state index, or -1 absent
    ia: np.ndarray
    ib: np.ndarray
    out: np.ndarray
    val: np.ndarray


class ExpandedOde:
    """Deterministic dynamics of the chaos coefficients of every state.

    The state vector stacks one coefficient block per model state, giving
    dimension ``n_x * n_terms``.  Evaluation first computes every unique
    product contraction, then combines them per input-function group, so the
    input dependence and its gradient come out of the same pass.
    """

    def __init__(self, model, basis, products, assembly, group_ids, metadata):
        self.model = model
        self.basis = basis
        self.n_x = model.n_x
        self.n_terms = basis.n_terms
        self.dim = self.n_x * self.n_terms
        self._products = products
        self._assembly = assembly  # list of (state_row, product_index, coeff, group)
        self.group_ids = group_ids  # input_id per group, None = constant 1
        self.metadata = metadata
        self._pack()
        self._jac = None

    def _pack(self):
        nt = self.n_terms
        ptr = [0]
        ia, ib, out, val = [], [], [], []
        off1, off2 = [], []
        for p in self._products:
            ia.append(p.ia)
            ib.append(p.ib)
            out.append(p.out)
            val.append(p.val)
            ptr.append(ptr[-1] + len(p.out))
            off1.append(p.src1 * nt if p.src1 >= 0 else -1)
            off2.append(p.src2 * nt if p.src2 >= 0 else -1)
        self._prod_ptr = np.array(ptr, dtype=np.int64)
        self._ins_a = np.concatenate(ia).astype(np.int32) if ia else np.empty(0, np.int32)
        self._ins_b = np.concatenate(ib).astype(np.int32) if ib else np.empty(0, np.int32)
        self._ins_out = np.concatenate(out).astype(np.int32) if out else np.empty(0, np.int32)
        self._ins_val = np.concatenate(val) if val else np.empty(0)
        self._off1 = np.array(off1, dtype=np.int64)
        self._off2 = np.array(off2, dtype=np.int64)
        self._asm_row_off = np.array([a[0] * nt for a in self._assembly], dtype=np.int64)
        self._asm_prod = np.array([a[1] for a in self._assembly], dtype=np.int64)
        self._asm_w = np.array([a[2] for a in self._assembly])
        self._asm_group = np.array([a[3] for a in self._assembly], dtype=np.int64)
        self.n_groups = len(self.group_ids)
        self.n_instructions = int(self._prod_ptr[-1])

    def input_values(self, u):
        """sigma_g(u) for every input group."""
        u = np.asarray(u, dtype=float)
        sig = np.empty(self.n_groups)
        for g, gid in enumerate(self.group_ids):
            sig[g] = 1.0 if gid is None else self.model.inputs[gid].fn(u)
        return sig

    def input_grads(self, u):
        """d sigma_g / du, shape (n_groups, n_u)."""
        u = np.asarray(u, dtype=float)
        out = np.zeros((self.n_groups, self.model.n_u))
        for g, gid in enumerate(self.group_ids):
            if gid is not None:
                out[g] = self.model.inputs[gid].grad(u)
        return out

    def _group_fields(self, x):
        pv = np.empty((len(self._products), self.n_terms))
        kernels.products_eval(
            x, self._prod_ptr, self._off1, self._off2,
            self._ins_a, self._ins_b, self._ins_out, self._ins_val, pv,
        )
        fg = np.empty((self.n_groups, self.dim))
        kernels.assemble_groups(
            pv, self._asm_row_off, self._asm_prod, self._asm_w, self._asm_group, fg
        )
        return fg

    def rhs(self, t, x, u):
        """Coefficient dynamics d xtilde / dt at (x, u)."""
        return self.input_values(u) @ self._group_fields(x)

    def rhs_and_input_jac(self, t, x, u):
        """Right-hand side together with its gradient in the inputs."""
        fg = self._group_fields(x)
        f = self.input_values(u) @ fg
        dfdu = self.input_grads(u).T @ fg  # (n_u, dim)
        return f, dfdu.T

    def prepare_jacobian(self):
        """Precompute the CSR sparsity pattern and fill maps of df/dx."""
        if self._jac is not None:
            return
        nt = self.n_terms
        rows, cols, gaths, vals, groups = [], [], [], [], []
        for (state_row, p_idx, coeff, group) in self._assembly:
            p = self._products[p_idx]
            if p.src1 < 0:
                continue
            r = state_row * nt + p.out
            if p.src2 >= 0:
                rows.append(r)
                cols.append(p.src1 * nt + p.ia)
                gaths.append(p.src2 * nt + p.ib)
                vals.append(coeff * p.val)
                groups.append(np.full(len(p.out), group, dtype=np.int32))
                rows.append(r)
                cols.append(p.src2 * nt + p.ib)
                gaths.append(p.src1 * nt + p.ia)
                vals.append(coeff * p.val)
                groups.append(np.full(len(p.out), group, dtype=np.int32))
            else:
                rows.append(r)
                cols.append(p.src1 * nt + p.ia)
                gaths.append(np.full(len(p.out), -1, dtype=np.int64))
                vals.append(coeff * p.val)
                groups.append(np.full(len(p.out), group, dtype=np.int32))
        if not rows:
            self._jac = {
                "indptr": np.zeros(self.dim + 1, dtype=np.int64),
                "indices": np.empty(0, dtype=np.int32),
                "nnz": 0,
                "f_slot": np.empty(0, dtype=np.int64),
                "f_val": np.empty(0),
                "f_gather": np.empty(0, dtype=np.int64),
                "f_group": np.empty(0, dtype=np.int64),
            }
            return
        rows = np.concatenate(rows)
        cols = np.concatenate(cols).astype(np.int64)
        gaths = np.concatenate(gaths).astype(np.int64)
        vals = np.concatenate(vals)
        groups = np.concatenate(groups)
        lin = rows.astype(np.int64) * self.dim + cols
        order = np.argsort(lin, kind="stable")
        lin_sorted = lin[order]
        uniq, slot_of_sorted = np.unique(lin_sorted, return_inverse=True)
        slots = np.empty(len(lin), dtype=np.int64)
        slots[order] = slot_of_sorted
        indices = (uniq % self.dim).astype(np.int32)
        urows = (uniq // self.dim).astype(np.int64)
        indptr = np.zeros(self.dim + 1, dtype=np.int64)
        np.add.at(indptr, urows + 1, 1)
        indptr = np.cumsum(indptr)
        self._jac = {
            "indptr": indptr,
            "indices": indices,
            "nnz": len(uniq),
            "f_slot": slots,
            "f_val": vals,
            "f_gather": gaths,
            "f_group": groups.astype(np.int64),
        }

    def jacobian_data(self, x, u):
        """CSR (indptr, indices, data) of df/dx at (x, u)."""
        self.prepare_jacobian()
        j = self._jac
        data = np.empty(j["nnz"])
        kernels.jac_fill(
            x, self.input_values(u), j["f_slot"], j["f_val"],
            j["f_gather"], j["f_group"], data,
        )
        return j["indptr"], j["indices"], data

    def jacobian(self, t, x, u):
        from scipy.sparse import csr_matrix

        indptr, indices, data = self.jacobian_data(x, u)
        return csr_matrix((data, indices, indptr), shape=(self.dim, self.dim))

    def block(self, x, state):
        """Coefficient block of one state from the flat vector."""
        nt = self.n_terms
        return x[state * nt : (state + 1) * nt]

    def index0_states(self, x):
        """Zeroth (mean-tracking) coefficient of every state."""
        return x.reshape(self.n_x, self.n_terms)[:, 0]

    def rhs_dense_reference(self, t, x, u):
        """Dense tensor contraction of the same projection (for verification)."""
        nt = self.n_terms
        sig = self.input_values(u)
        out = np.zeros(self.dim)
        for (state_row, p_idx, coeff, group) in self._assembly:
            p = self._products[p_idx]
            contrib = np.zeros(nt)
            if p.src2 >= 0:
                dense = np.zeros((nt, nt, nt))
                np.add.at(dense, (p.ia, p.ib, p.out), p.val)
                x1 = self.block(x, p.src1)
                x2 = self.block(x, p.src2)
                contrib = np.einsum("i,j,ijk->k", x1, x2, dense)
            elif p.src1 >= 0:
                dense = np.zeros((nt, nt))
                np.add.at(dense, (p.ia, p.out), p.val)
                contrib = self.block(x, p.src1) @ dense
            else:
                contrib = np.zeros(nt)
                np.add.at(contrib, p.out, p.val)
            out[state_row * nt : (state_row + 1) * nt] += sig[group] * coeff * contrib
        return out

    def to_json_dict(self):
        prods = []
        for p in self._products:
            prods.append(
                {
                    "src1": p.src1,
                    "src2": p.src2,
                    "ia": p.ia.tolist(),
                    "ib": p.ib.tolist(),
                    "out": p.out.tolist(),
                    "val": p.val.tolist(),
                }
            )
        return {
            "model": self.model.to_json_dict(),
            "basis": self.basis.to_json_dict(),
            "products": prods,
            "assembly": [list(a) for a in self._assembly],
            "group_ids": list(self.group_ids),
            "metadata": self.metadata,
        }

    @classmethod
    def from_json_dict(cls, d, inputs):
        model = PolynomialOde.from_json_dict(d["model"], inputs)
        basis = OrthoBasis.from_json_dict(d["basis"])
        products = [
            _Product(
                src1=p["src1"],
                src2=p["src2"],
                ia=np.array(p["ia"], dtype=np.int32),
                ib=np.array(p["ib"], dtype=np.int32),
                out=np.array(p["out"], dtype=np.int32),
                val=np.array(p["val"]),
            )
            for p in d["products"]
        ]
        assembly = [tuple(a) for a in d["assembly"]]
        return cls(model, basis, products, assembly, tuple(d["group_ids"]),
                   d["metadata"])


def project_dynamics(model, basis, tensors):
    """Project a polynomial ODE onto the basis, yielding an ExpandedOde."""
    if tensors.basis is not basis and not tensors.basis.same_structure(basis):
        raise ValueError("projection tensors were built for a different basis")
    for pid, exp in model.params.items():
        if not exp.basis.same_structure(basis):
            raise ValueError(
                f"parameter {pid!r} is expanded over a different basis"
            )
    nt = basis.n_terms

    group_ids = []
    group_pos = {}

    def group_of(input_id):
        if input_id not in group_pos:
            group_pos[input_id] = len(group_ids)
            group_ids.append(input_id)
        return group_pos[input_id]

    products = []
    prod_pos = {}

    def product_of(param_id, state_slots):
        key = (param_id, tuple(sorted(state_slots)))
        if key in prod_pos:
            return prod_pos[key]
        slots = sorted(state_slots)
        pcoeffs = model.params[param_id].coeffs if param_id is not None else None
        deg = len(slots)
        if deg > 2:
            raise NotImplementedError(
                "terms with state degree above two are not supported; lift the model"
            )
        if deg == 2:
            if pcoeffs is None or (np.count_nonzero(pcoeffs) == 1 and pcoeffs[0] != 0):
                if 2 not in tensors.tables:
                    raise ValueError("tensors were built with d_max < 2")
                a, b, o, v = _ordered_entries(*tensors.tables[2])
                if pcoeffs is not None:
                    v = v * pcoeffs[0]
            else:
                if 3 not in tensors.tables:
                    raise ValueError("parameter-weighted quadratic terms need d_max >= 3")
                a, b, o, v = _contract_param(tensors, pcoeffs)
            prod = _Product(src1=slots[0], src2=slots[1], ia=a, ib=b, out=o, val=v)
        elif deg == 1:
            if pcoeffs is None or (np.count_nonzero(pcoeffs) == 1 and pcoeffs[0] != 0):
                scale = 1.0 if pcoeffs is None else float(pcoeffs[0])
                k = np.arange(nt, dtype=np.int32)
                prod = _Product(src1=slots[0], src2=-1, ia=k, ib=k, out=k.copy(),
                                val=np.full(nt, scale))
            else:
                if 2 not in tensors.tables:
                    raise ValueError("parameter-weighted linear terms need d_max >= 2")
                a, b, o, v = _ordered_entries(*tensors.tables[2])
                w = pcoeffs[a]
                keep = w != 0.0
                prod = _Product(src1=slots[0], src2=-1, ia=b[keep], ib=b[keep],
                                out=o[keep], val=v[keep] * w[keep])
        else:
            if pcoeffs is None:
                prod = _Product(src1=-1, src2=-1, ia=np.zeros(1, np.int32),
                                ib=np.zeros(1, np.int32), out=np.zeros(1, np.int32),
                                val=np.ones(1))
            else:
                nz = np.flatnonzero(pcoeffs).astype(np.int32)
                prod = _Product(src1=-1, src2=-1, ia=nz, ib=nz, out=nz.copy(),
                                val=pcoeffs[nz].astype(float))
        prod_pos[key] = len(products)
        products.append(prod)
        return prod_pos[key]

    assembly = []
    for i, tl in enumerate(model.terms):
        for mono in tl:
            slots = []
            for l, g in enumerate(mono.exponents):
                slots.extend([l] * g)
            p = product_of(mono.param_id, slots)
            g = group_of(mono.input_id)
            assembly.append((i, p, float(mono.coeff), g))

    nnz = sum(len(p.out) for p in products)
    metadata = dict(tensors.metadata)
    metadata["instruction_count"] = int(nnz)
    metadata["state_dimension"] = model.n_x * nt
    return ExpandedOde(model, basis, products, assembly, tuple(group_ids), metadata)


def project_initial_conditions(ic_specs, basis):
    """Project per-state initial conditions onto the basis (flat vector).

    Each spec is one of
      ("dirac", value)                    exact estimate
      ("gaussian", mean, std, dim)        mean + std * xi_dim
      ("expansion", PCExpansion)          precomputed coefficients
      ("fit", fn[, n_samples[, seed]])    collocation fit of fn(xi)
    """
    nt = basis.n_terms
    out = np.zeros(len(ic_specs) * nt)
    first_order = {}
    degs = basis.index_set.degrees()
    for k in np.flatnonzero(degs == 1):
        j = int(np.argmax(basis.index_set.indices[k]))
        first_order[j] = int(k)
    for i, spec in enumerate(ic_specs):
        if callable(spec):
            raise ValueError(
                "nonlinear initial map must be wrapped as ('fit', fn) to be "
                "collocation-fitted onto the basis"
            )
        kind = spec[0]
        block = out[i * nt : (i + 1) * nt]
        if kind == "dirac":
            block[0] = float(spec[1])
        elif kind == "gaussian":
            _, m, s, j = spec
            block[0] = float(m)
            block[first_order[j]] = float(s)
        elif kind == "expansion":
            exp = spec[1]
            if not exp.basis.same_structure(basis):
                raise ValueError(f"initial condition {i} uses a different basis")
            block[:] = exp.coeffs
        elif kind == "fit":
            fn = spec[1]
            n_samples = spec[2] if len(spec) > 2 else None
            seed = spec[3] if len(spec) > 3 else 0
            block[:] = fit_function(fn, basis, n_samples=n_samples, seed=seed).coeffs
        else:
            raise ValueError(f"unknown initial-condition spec {kind!r}")
    return out
