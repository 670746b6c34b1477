"""Gradient engine checks: every primitive against central differences,
randomized composite programs, record discipline, and gradients of
gradients via retained records."""

from __future__ import annotations

import numpy as np
import pytest

from mscn import autodiff as ad
from conftest import assert_close_grad, central_difference, rng_for


def grad_of(build, values, wrt: int):
    """Analytic gradient of build(leaves)[scalar] w.r.t. leaf `wrt`."""
    with ad.Tape() as tape:
        leaves = [tape.leaf(v) for v in values]
        out = build(leaves)
        grads = ad.backward(tape, out)
    return grads[leaves[wrt]].data


def fd_of(build, values, wrt: int, h: float = 1e-6):
    def f(x):
        vals = [np.array(v, dtype=np.float64) for v in values]
        vals[wrt] = x
        return float(build([ad.Tensor(v) for v in vals]).data)

    return central_difference(f, np.array(values[wrt], dtype=np.float64), h=h)


def check_all_grads(build, values, rel=1e-5, label=""):
    for w in range(len(values)):
        assert_close_grad(grad_of(build, values, w), fd_of(build, values, w),
                          rel=rel, label=f"{label}/leaf{w}")


class TestForwardValues:
    def test_sigmoid_midpoint_and_symmetry(self):
        assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5
        x = np.linspace(-6, 6, 25)
        s = ad.sigmoid(ad.Tensor(x)).data
        np.testing.assert_allclose(s + ad.sigmoid(ad.Tensor(-x)).data, 1.0, rtol=0, atol=1e-15)
        assert np.all((s > 0) & (s < 1))

    def test_relu_and_abs(self):
        x = np.array([-2.0, 0.0, 3.5])
        np.testing.assert_array_equal(ad.relu(ad.Tensor(x)).data, [0.0, 0.0, 3.5])
        np.testing.assert_array_equal(ad.absval(ad.Tensor(x)).data, [2.0, 0.0, 3.5])

    def test_clamp(self):
        x = np.array([-1.0, 0.3, 2.0])
        np.testing.assert_array_equal(ad.clamp(ad.Tensor(x), 0.0, 1.0).data, [0.0, 0.3, 1.0])

    def test_l2norm_rows(self):
        x = np.array([[3.0, 4.0], [0.0, 2.0]])
        np.testing.assert_allclose(ad.l2norm(ad.Tensor(x)).data, [5.0, 2.0])

    def test_row_max_tie_takes_lowest_index(self):
        x = ad.Tensor([[1.0, 7.0, 7.0], [2.0, 2.0, 0.0]])
        vals, idx = ad.row_max(x)
        np.testing.assert_array_equal(vals.data, [7.0, 2.0])
        np.testing.assert_array_equal(idx, [1, 0])

    def test_matmul_shapes(self):
        rng = rng_for(11)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        v = rng.normal(size=4)
        np.testing.assert_allclose(ad.matmul(ad.Tensor(a), ad.Tensor(b)).data, a @ b)
        np.testing.assert_allclose(ad.matmul(ad.Tensor(a), ad.Tensor(v)).data, a @ v)
        np.testing.assert_allclose(ad.matmul(ad.Tensor(v), ad.Tensor(b)).data, v @ b)

    def test_forward_same_with_and_without_recording(self):
        rng = rng_for(12)
        x = rng.normal(size=(3, 3))

        def run():
            t = ad.Tensor(x)
            return ad.reduce_sum(ad.sigmoid(ad.matmul(t, ad.transpose(t)))).data

        plain = run()
        with ad.Tape() as tape:
            t = tape.leaf(x)
            recorded = ad.reduce_sum(ad.sigmoid(ad.matmul(t, ad.transpose(t)))).data
        np.testing.assert_array_equal(plain, recorded)

    def test_primitive_forward_dispatch(self):
        out = ad.primitive_forward("add", ad.Tensor(1.0), ad.Tensor(2.0))
        assert out.item() == 3.0
        with pytest.raises(ValueError, match="unknown primitive"):
            ad.primitive_forward("exp", ad.Tensor(1.0))


class TestShapeAndDomainErrors:
    def test_matmul_mismatch_names_op(self):
        with pytest.raises(ad.ShapeMismatchError, match="matmul"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))

    def test_broadcast_impossible(self):
        with pytest.raises(ad.ShapeMismatchError, match="add"):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))

    def test_log_domain(self):
        with pytest.raises(ValueError, match="positive"):
            ad.log(ad.Tensor([1.0, 0.0]))

    def test_div_by_zero(self):
        with pytest.raises(ZeroDivisionError):
            ad.div(ad.Tensor(1.0), ad.Tensor([2.0, 0.0]))

    def test_clamp_rejects_nan_and_empty_interval(self):
        with pytest.raises(ValueError, match="NaN"):
            ad.clamp(ad.Tensor([np.nan]), 0.0, 1.0)
        with pytest.raises(ValueError, match="interval"):
            ad.clamp(ad.Tensor([0.5]), 1.0, 0.0)

    def test_reshape_size_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError, match="reshape"):
            ad.reshape(ad.Tensor(np.zeros(5)), (2, 3))

    def test_narrow_out_of_range(self):
        with pytest.raises(ad.ShapeMismatchError, match="narrow"):
            ad.narrow(ad.Tensor(np.zeros(4)), 0, 2, 3)

    def test_transpose_needs_2d(self):
        with pytest.raises(ad.ShapeMismatchError, match="transpose"):
            ad.transpose(ad.Tensor(np.zeros(3)))


class TestRecordDiscipline:
    def test_backward_requires_scalar(self):
        with ad.Tape() as tape:
            x = tape.leaf(np.ones(3))
            y = ad.square(x)
            with pytest.raises(ad.RecordError, match="scalar"):
                ad.backward(tape, y)

    def test_backward_on_empty_record(self):
        tape = ad.Tape()
        with pytest.raises(ad.RecordError, match="empty"):
            ad.backward(tape, ad.Tensor(1.0))

    def test_backward_foreign_output(self):
        with ad.Tape() as tape:
            tape.leaf(1.0)
            with pytest.raises(ad.RecordError, match="not recorded"):
                ad.backward(tape, ad.Tensor(2.0))

    def test_mixing_records_rejected(self):
        with ad.Tape() as t1:
            a = t1.leaf(1.0)
            ad.square(a)
        with ad.Tape() as t2:
            b = t2.leaf(2.0)
            with pytest.raises(ad.RecordError, match="different record"):
                ad.add(a, b)

    def test_retaining_requires_retain_flag(self):
        with ad.Tape() as tape:
            x = tape.leaf(2.0)
            y = ad.square(x)
            with pytest.raises(ad.RecordError, match="retain"):
                ad.backward_retaining(tape, y)

    def test_unused_leaf_gets_zeros(self):
        with ad.Tape() as tape:
            x = tape.leaf(np.ones((2, 2)))
            z = tape.leaf(np.ones(3))
            out = ad.reduce_sum(ad.square(x))
            grads = ad.backward(tape, out)
        np.testing.assert_array_equal(grads[z].data, np.zeros(3))
        np.testing.assert_array_equal(grads[x].data, 2 * np.ones((2, 2)))

    def test_fanout_accumulates_like_split_leaves(self):
        """A leaf used twice gets the sum of both paths' contributions."""
        v = 1.7

        with ad.Tape() as tape:
            x = tape.leaf(v)
            out = ad.mul(x, x)
            g_shared = ad.backward(tape, out)[x].item()

        with ad.Tape() as tape:
            a, b = tape.leaf(v), tape.leaf(v)
            out = ad.mul(a, b)
            grads = ad.backward(tape, out)
            g_split = grads[a].item() + grads[b].item()

        assert g_shared == g_split == pytest.approx(2 * v, rel=1e-15)

    def test_gradients_are_plain_values_after_backward(self):
        with ad.Tape() as tape:
            x = tape.leaf(3.0)
            out = ad.square(x)
            g = ad.backward(tape, out)[x]
        assert g.node is None


class TestPrimitiveGradients:
    """Central-difference checks per primitive, seeded random loops."""

    def test_elementwise_binary(self):
        for trial in range(20):
            rng = rng_for(100, trial)
            shapes = [(3,), (2, 3), (1, 3), (2, 1), ()]
            sa, sb = rng.choice(len(shapes), size=2)
            a = rng.normal(size=shapes[sa])
            b = rng.normal(size=shapes[sb]) + 2.0  # keep denominators away from 0
            for op in (ad.add, ad.sub, ad.mul, ad.div):
                check_all_grads(
                    lambda ls, op=op: ad.reduce_sum(op(ls[0], ls[1])),
                    [a, b], label=op.__name__)

    def test_matmul_all_rank_pairs(self):
        for trial in range(10):
            rng = rng_for(101, trial)
            m, k, n = rng.integers(1, 5, size=3)
            A, B = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            v, w = rng.normal(size=k), rng.normal(size=m)
            check_all_grads(lambda ls: ad.reduce_sum(ad.matmul(ls[0], ls[1])), [A, B], label="mm22")
            check_all_grads(lambda ls: ad.reduce_sum(ad.matmul(ls[0], ls[1])), [A, v], label="mm21")
            check_all_grads(lambda ls: ad.reduce_sum(ad.matmul(ls[0], ls[1])), [w, A], label="mm12")

    def test_smooth_unaries(self):
        for trial in range(12):
            rng = rng_for(102, trial)
            x = rng.normal(size=(3, 2))
            xp = np.abs(x) + 0.3  # log domain
            check_all_grads(lambda ls: ad.reduce_sum(ad.square(ls[0])), [x], label="square")
            check_all_grads(lambda ls: ad.reduce_sum(ad.sigmoid(ls[0])), [x], label="sigmoid")
            check_all_grads(lambda ls: ad.reduce_sum(ad.log(ls[0])), [xp], label="log")
            check_all_grads(lambda ls: ad.reduce_sum(ad.scalar_mul(-1.3, ls[0])), [x], label="scalar_mul")

    def test_kinked_unaries_away_from_kinks(self):
        for trial in range(12):
            rng = rng_for(103, trial)
            x = rng.normal(size=(4,))
            x = np.where(np.abs(x) < 0.05, 0.2, x)  # step 1e-6 never crosses 0
            check_all_grads(lambda ls: ad.reduce_sum(ad.relu(ls[0])), [x], label="relu")
            check_all_grads(lambda ls: ad.reduce_sum(ad.absval(ls[0])), [x], label="abs")
            y = rng.uniform(0.1, 0.9, size=4)
            y = np.where(np.abs(y - 0.25) < 0.05, 0.4, y)
            y = np.where(np.abs(y - 0.75) < 0.05, 0.6, y)
            check_all_grads(lambda ls: ad.reduce_sum(ad.clamp(ls[0], 0.25, 0.75)), [y], label="clamp")

    def test_subgradient_conventions_at_kinks(self):
        """At the hinge point the chosen subgradient is 0; clamp rails pass none."""
        with ad.Tape() as tape:
            x = tape.leaf(np.array([0.0, -1.0, 1.0]))
            g = ad.backward(tape, ad.reduce_sum(ad.relu(x)))[x].data
        np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])
        with ad.Tape() as tape:
            x = tape.leaf(np.array([0.0, 0.5, 1.0]))
            g = ad.backward(tape, ad.reduce_sum(ad.clamp(x, 0.0, 1.0)))[x].data
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_l2norm(self):
        for trial in range(12):
            rng = rng_for(104, trial)
            x = rng.normal(size=(3, 4))
            x[np.linalg.norm(x, axis=-1) < 0.5] += 1.0
            check_all_grads(lambda ls: ad.reduce_sum(ad.l2norm(ls[0])), [x], label="l2norm2d")
            v = rng.normal(size=5)
            if np.linalg.norm(v) < 0.5:
                v += 1.0
            check_all_grads(lambda ls: ad.l2norm(ls[0]), [v], label="l2norm1d")

    def test_row_max_gradient_routes_to_argmax(self):
        for trial in range(10):
            rng = rng_for(105, trial)
            x = rng.normal(size=(3, 4))
            # keep a clear gap so the FD step cannot flip the winner
            x[np.arange(3), rng.integers(0, 4, size=3)] += 2.0
            check_all_grads(lambda ls: ad.reduce_sum(ad.row_max(ls[0])[0]), [x], label="row_max")

    def test_reductions_and_shape_ops(self):
        for trial in range(10):
            rng = rng_for(106, trial)
            x = rng.normal(size=(2, 3, 4))
            for axis in (None, 0, 1, 2, (0, 2)):
                for keep in (False, True):
                    check_all_grads(
                        lambda ls, a=axis, k=keep: ad.reduce_sum(
                            ad.square(ad.reduce_sum(ls[0], axis=a, keepdims=k))),
                        [x], label=f"sum{axis}{keep}")
                    check_all_grads(
                        lambda ls, a=axis, k=keep: ad.reduce_sum(
                            ad.square(ad.reduce_mean(ls[0], axis=a, keepdims=k))),
                        [x], label=f"mean{axis}{keep}")
            m = rng.normal(size=(3, 2))
            check_all_grads(lambda ls: ad.reduce_sum(ad.square(ad.transpose(ls[0]))), [m], label="T")
            check_all_grads(lambda ls: ad.reduce_sum(ad.square(ad.reshape(ls[0], (6,)))), [m], label="reshape")
            check_all_grads(
                lambda ls: ad.reduce_sum(ad.square(ad.broadcast_to(ls[0], (4, 3, 2)))),
                [m], label="bcast")

    def test_concat_narrow_roundtrip_gradients(self):
        for trial in range(8):
            rng = rng_for(107, trial)
            a = rng.normal(size=(2, 3))
            b = rng.normal(size=(4, 3))
            check_all_grads(
                lambda ls: ad.reduce_sum(ad.square(ad.concat([ls[0], ls[1]], axis=0))),
                [a, b], label="concat")
            check_all_grads(
                lambda ls: ad.reduce_sum(ad.square(ad.narrow(ls[0], 0, 1, 2))),
                [b], label="narrow")
            with ad.Tape() as tape:
                x = tape.leaf(b)
                back = ad.narrow(ad.concat([x, ad.Tensor(a)], axis=0), 0, 0, 4)
            np.testing.assert_array_equal(back.data, b)


def _build_random_program(rng: np.random.Generator):
    """Random composite over the smooth primitives.

    Returns a list of instructions; replaying them is a pure function of
    the leaf values, so the same program serves analytic and numeric runs.
    """
    shapes = [(), (3,), (2, 3), (3, 2), (2, 2)]
    program = [("leaf", shapes[rng.integers(len(shapes))])
               for _ in range(int(rng.integers(2, 5)))]

    def shape_of(i):
        kind = program[i][0]
        if kind == "leaf":
            return program[i][1]
        return program[i][3]  # builders store the result shape

    steps = int(rng.integers(5, 13))
    for _ in range(steps):
        n = len(program)
        choice = rng.integers(0, 9)
        i = int(rng.integers(n))
        si = shape_of(i)
        if choice == 0:  # broadcastable binary
            j = int(rng.integers(n))
            try:
                out = np.broadcast_shapes(si, shape_of(j))
            except ValueError:
                continue
            op = ("add", "sub", "mul")[rng.integers(3)]
            program.append((op, (i, j), {}, out))
        elif choice == 1:  # safe division
            j = int(rng.integers(n))
            try:
                out = np.broadcast_shapes(si, shape_of(j))
            except ValueError:
                continue
            program.append(("safe_div", (i, j), {}, out))
        elif choice == 2:
            program.append((("square", "sigmoid")[rng.integers(2)], (i,), {}, si))
        elif choice == 3:
            program.append(("safe_log", (i,), {}, si))
        elif choice == 4:  # matmul with a fresh compatible leaf
            if len(si) != 2:
                continue
            k = int(rng.integers(1, 4))
            program.append(("leaf", (si[1], k)))
            program.append(("matmul", (i, len(program) - 1), {}, (si[0], k)))
        elif choice == 5:
            if len(si) == 0:
                continue
            axis = int(rng.integers(len(si)))
            keep = bool(rng.integers(2))
            out = tuple(d if a != axis else 1 for a, d in enumerate(si) if keep or a != axis)
            op = ("sum", "mean")[rng.integers(2)]
            program.append((op, (i,), {"axis": axis, "keepdims": keep}, out))
        elif choice == 6:
            if len(si) != 2:
                continue
            program.append(("transpose", (i,), {}, si[::-1]))
        elif choice == 7:
            size = int(np.prod(si, dtype=np.int64))
            program.append(("reshape", (i,), {"shape": (size,)}, (size,)))
        elif choice == 8:
            program.append(("safe_l2norm", (i,), {}, si[:-1] if si else None))
            if program[-1][3] is None:
                program.pop()
    return program


def _run_program(program, leaf_values, tape=None):
    vals = []
    leaves = []
    it = iter(leaf_values)
    for ins in program:
        if ins[0] == "leaf":
            v = next(it)
            t = tape.leaf(v) if tape is not None else ad.Tensor(v)
            leaves.append(t)
            vals.append(t)
            continue
        op, idxs, kw = ins[0], ins[1], ins[2]
        args = [vals[i] for i in idxs]
        if op == "safe_div":
            out = ad.div(args[0], ad.add(ad.square(args[1]), ad.Tensor(0.5)))
        elif op == "safe_log":
            out = ad.log(ad.add(ad.square(args[0]), ad.Tensor(0.3)))
        elif op == "safe_l2norm":
            out = ad.l2norm(ad.add(ad.square(args[0]), ad.Tensor(0.2)))
        else:
            out = ad.primitive_forward(op, *args, **kw)
        vals.append(out)
    final = vals[-1]
    size = int(np.prod(final.shape, dtype=np.int64))
    loss = ad.reduce_mean(ad.sigmoid(ad.reshape(final, (size,))))
    return loss, leaves


class TestCompositePrograms:
    def test_random_programs_match_central_differences(self):
        checked = 0
        for trial in range(60):
            rng = rng_for(200, trial)
            program = _build_random_program(rng)
            leaf_shapes = [ins[1] for ins in program if ins[0] == "leaf"]
            values = [rng.normal(size=s) for s in leaf_shapes]

            with ad.Tape() as tape:
                loss, leaves = _run_program(program, values, tape)
                grads = ad.backward(tape, loss)

            for w in range(len(values)):
                def f(x, w=w):
                    vals = [np.array(v) for v in values]
                    vals[w] = x
                    return float(_run_program(program, vals)[0].data)

                assert_close_grad(grads[leaves[w]].data,
                                  central_difference(f, values[w]),
                                  rel=1e-5, label=f"program{trial}")
                checked += 1
        assert checked > 100

    def test_same_seed_same_gradients_bitwise(self):
        def run():
            rng = rng_for(201)
            program = _build_random_program(rng)
            values = [rng.normal(size=ins[1]) for ins in program if ins[0] == "leaf"]
            with ad.Tape() as tape:
                loss, leaves = _run_program(program, values, tape)
                grads = ad.backward(tape, loss)
            return [grads[l].data.copy() for l in leaves]

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestRetainedRecords:
    def test_virtual_step_toy(self):
        """f(w, t) = t * w^2; one explicit descent step on w, differentiated
        through w.r.t. t.

        w_hat = w - a * 2tw; at w=1, t=1, a=0.1: w_hat = 0.8 and
        d(w_hat^2)/dt = 2 * 0.8 * (-0.2) = -0.32.
        """
        with ad.Tape(retain=True) as tape:
            w = tape.leaf(1.0)
            t = tape.leaf(1.0)
            f = ad.mul(t, ad.square(w))
            gw = ad.backward_retaining(tape, f)[w]
            w_hat = ad.sub(w, ad.scalar_mul(0.1, gw))
            outer = ad.square(w_hat)
            gt = ad.backward(tape, outer)[t]
        assert w_hat.item() == pytest.approx(0.8, rel=1e-15)
        assert gt.item() == pytest.approx(-0.32, rel=1e-12)

    def test_second_and_third_derivatives_of_cubic(self):
        """x^3: retained backward twice gives 6x, a plain one gives 6."""
        x0 = 1.3
        with ad.Tape(retain=True) as tape:
            x = tape.leaf(x0)
            y = ad.mul(x, ad.square(x))
            g1 = ad.backward_retaining(tape, y)[x]
            g2 = ad.backward_retaining(tape, g1)[x]
            g3 = ad.backward(tape, g2)[x]
        assert g1.item() == pytest.approx(3 * x0 ** 2, rel=1e-12)
        assert g2.item() == pytest.approx(6 * x0, rel=1e-12)
        assert g3.item() == pytest.approx(6.0, rel=1e-12)

    def test_second_order_matches_fd_of_analytic_gradient(self):
        """d/dx [dL/dx] for L = sum(sigmoid(x @ v)) against FD of the
        analytic first gradient."""
        rng = rng_for(300)
        x0 = rng.normal(size=4)
        v = rng.normal(size=4)

        with ad.Tape(retain=True) as tape:
            x = tape.leaf(x0)
            loss = ad.sigmoid(ad.matmul(x, ad.Tensor(v)))
            g = ad.backward_retaining(tape, loss)[x]
            # contract the gradient with a fixed vector to get a scalar
            probe = rng.normal(size=4)
            contracted = ad.matmul(g, ad.Tensor(probe))
            hvp = ad.backward(tape, contracted)[x].data

        def g_dot_probe(xv):
            with ad.Tape() as tape2:
                xx = tape2.leaf(xv)
                loss = ad.sigmoid(ad.matmul(xx, ad.Tensor(v)))
                gg = ad.backward(tape2, loss)[xx].data
            return float(gg @ probe)

        assert_close_grad(hvp, central_difference(g_dot_probe, x0), rel=1e-4,
                          label="hvp")
