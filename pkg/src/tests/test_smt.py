import re

import numpy as np
from unittest import TestCase

import net
import smt
import util
from dynamics import DynamicsModel, SystemKind
from interval import BoxRegion
from tests.networks import norm_squared_certificate, zero_policy
from util import UsageError

REGION = BoxRegion([-1.0, -1.0], [1.0, 1.0])


def balanced(text: str) -> bool:
    depth = 0
    for char in text:
        depth += {"(": 1, ")": -1}.get(char, 0)
        if depth < 0:
            return False
    return depth == 0


class TestTerms(TestCase):
    def test_format_real(self):
        assert smt.format_real(0.5) == "0.5"
        assert smt.format_real(-2.0) == "(- 2.0)"
        assert "e" not in smt.format_real(1e-20)
        with self.assertRaises(UsageError):
            smt.format_real(np.inf)

    def test_expressions(self):
        x = smt.SmtTerm("x")
        assert str(2.0 * x + 1.0) == "(+ (* 2.0 x) 1.0)"
        assert str(util.sin(x) - x**2) == "(- (sin x) (* x x))"
        assert str(util.clip(x, -1.0, 1.0)) == "(ite (< x (- 1.0)) (- 1.0) (ite (> x 1.0) 1.0 x))"

    def test_numpy_scalars_do_not_broadcast_over_terms(self):
        assert str(np.float64(3.0) * smt.SmtTerm("y")) == "(* 3.0 y)"

    def test_script_layout(self):
        script = smt.Script("example")
        x = script.declare("x1", -1.0, 2.0)
        script.require(smt.apply(">", x, 0.0))
        text = script.render()
        assert text.startswith("; example\n(set-logic QF_NRA)\n")
        assert "(declare-fun x1 () Real)" in text
        assert "(assert (<= (- 1.0) x1))" in text
        assert text.endswith("(check-sat)\n(exit)\n")


class TestExport(TestCase):
    def test_certificate_queries(self):
        model = DynamicsModel(SystemKind.VAN_DER_POL)
        queries = smt.export_smt2(norm_squared_certificate(), zero_policy(), model, REGION, 0.5)
        assert set(queries) == {"positivity", "decrease", "boundary"}
        for text in queries.values():
            assert balanced(text)
            assert "(check-sat)" in text
            assert re.search(r"\(declare-fun x2 \(\) Real\)", text)
        assert "(define-fun W_a2_1 () Real (tanh W_z2_1))" in queries["positivity"]
        assert "W_grad_1" in queries["decrease"]
        assert "W_dot" in queries["decrease"]
        assert "(or (= x1 (- 1.0))" in queries["boundary"]

    def test_policy_terms_for_each_actuation(self):
        rng = np.random.default_rng(0)
        for actuation, core_dims, marker in [
            (net.Actuation.box_squash([-1.0], [1.0]), (2, 3, 1), "tanh"),
            (net.Actuation.box_vertices([-1.0], [1.0]), (2, 3, 2), "pi_norm"),
            (net.Actuation.box_clamp([-1.0], [1.0]), (2, 3, 1), "ite"),
        ]:
            policy = net.PolicyNet(
                net.Mlp.initialize(core_dims, rng, output_activation=net.Activation.IDENTITY),
                actuation,
                net.anchor_logits(actuation, 0.0),
            )
            script = smt.Script("policy")
            u = smt.policy_terms(script, policy, [script.declare("x1", -1, 1), script.declare("x2", -1, 1)])
            assert [str(term) for term in u] == ["u1"]
            text = script.render()
            assert marker in text
            assert balanced(text)

    def test_bicycle_dynamics_are_exported(self):
        model = DynamicsModel(SystemKind.BICYCLE_TRACKING)
        region = BoxRegion([-0.5, -0.5], [0.5, 0.5])
        actuation = net.Actuation.box_squash([-1.0], [1.0])
        policy = net.PolicyNet(
            net.Mlp.zeros((2, 1), net.Activation.IDENTITY), actuation, net.anchor_logits(actuation, model.u_star)
        )
        decrease = smt.export_smt2(norm_squared_certificate(), policy, model, region, 0.3)["decrease"]
        assert "(tan u1)" in decrease
        assert "(cos x2)" in decrease

    def test_lqr_queries(self):
        p = np.array([[np.sqrt(3.0), 1.0], [1.0, np.sqrt(3.0)]])
        k = np.array([[1.0, np.sqrt(3.0)]])
        queries = smt.export_lqr_smt2(DynamicsModel(SystemKind.DOUBLE_INTEGRATOR), p, k, 0.5)
        assert set(queries) == {"decrease", "input"}
        assert all(balanced(text) for text in queries.values())
        assert "(define-fun energy () Real" in queries["decrease"]
        assert "(> (abs u1) 1.0)" in queries["input"]
