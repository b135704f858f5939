import json
import math

import numpy as np
import pytest

from consensus_ot.cli import main
from consensus_ot.errors import ParseError
from consensus_ot.formats import (emit_trace, generate_random_instance, instance_from_dict, instance_to_dict,
                                  make_rng, parse_instance, parse_plan, parse_prices, parse_script, plan_to_dict,
                                  prices_to_dict, serialize_instance, serialize_script)
from consensus_ot.model import (Edge, SourceSpec, TargetSpec, build_instance, check_balance, check_sufficiency,
                                log_revenue, threshold, validate_instance)
from consensus_ot.oracle import solve_oracle
from consensus_ot.primal import IterationTrace, StopRule, run_primal
from consensus_ot.scenarios import market_scenario


class TestGenerator:
    @pytest.mark.parametrize("seed", [0, 7, 2**64 - 1])
    def test_equality_mode_is_balanced(self, seed):
        inst = generate_random_instance(5, 3, seed)
        assert check_balance(inst)
        assert sum(t.lower for t in inst.targets) == pytest.approx(1.0, abs=1e-12)
        assert inst.n_edges == 15

    @pytest.mark.parametrize("family", ["linear", "quadratic", "mixed"])
    def test_bounded_mode_bounds(self, family):
        inst = generate_random_instance(4, 5, 3, family=family, mode="bounded", density=0.6)
        assert all(t.upper == 100.0 for t in inst.targets)
        assert all(s.lower == 0.0 for s in inst.sources)
        assert inst.n_edges <= 20
        assert validate_instance(inst).ok and check_sufficiency(inst)

    def test_deterministic_files(self, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        serialize_instance(generate_random_instance(6, 6, 99, "mixed", "bounded"), a)
        serialize_instance(generate_random_instance(6, 6, 99, "mixed", "bounded"), b)
        assert a.read_bytes() == b.read_bytes()
        serialize_instance(generate_random_instance(6, 6, 100, "mixed", "bounded"), b)
        assert a.read_bytes() != b.read_bytes()

    def test_rng_is_pcg64(self):
        assert make_rng(5).random() == np.random.Generator(np.random.PCG64(5)).random()
        with pytest.raises(ValueError):
            make_rng(-1)


class TestInstanceDocuments:
    def test_roundtrip(self, tmp_path):
        inst = build_instance(
            [TargetSpec("x", 0.5, math.inf)], [SourceSpec("y", 0.0, 2.0)],
            [Edge("x", "y", log_revenue(1.5, linear_cost=0.2), threshold(2.0, 0.75, quadratic_cost=0.1))],
        )
        path = tmp_path / "inst.json"
        serialize_instance(inst, path)
        assert parse_instance(path) == inst
        assert json.loads(path.read_text())["targets"][0]["p_h"] == "inf"

    def test_generated_roundtrip(self, tmp_path):
        inst = generate_random_instance(3, 4, 11, "mixed", "bounded")
        assert instance_from_dict(json.loads(json.dumps(instance_to_dict(inst)))) == inst

    def test_missing_field_names_source(self):
        doc = instance_to_dict(generate_random_instance(2, 2, 1))
        del doc["sources"][1]["q_h"]
        with pytest.raises(ParseError, match=r"s2.*q_h"):
            instance_from_dict(doc)

    def test_unknown_family(self):
        doc = instance_to_dict(generate_random_instance(1, 1, 1))
        doc["edges"][0]["f"] = {"family": "cubic", "rate": 1.0}
        with pytest.raises(ParseError, match="unknown utility family"):
            instance_from_dict(doc)

    def test_malformed_json_has_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"targets": [\n  {"id": "x",}\n]}')
        with pytest.raises(ParseError, match=r"bad.json:2:"):
            parse_instance(path)

    def test_invalid_instance_rejected(self):
        doc = instance_to_dict(generate_random_instance(1, 1, 1))
        doc["targets"][0]["p_l"] = 5.0
        with pytest.raises(Exception, match="bound ordering"):
            instance_from_dict(doc)

    def test_plan_and_price_roundtrip(self, tmp_path, diag2):
        inst = diag2.to_problem()
        plan = inst.plan_dict(np.array([0.5, 0.0, 0.0, 0.5]))
        path = tmp_path / "plan.json"
        path.write_text(json.dumps(plan_to_dict(plan)))
        assert parse_plan(path) == plan
        path = tmp_path / "prices.json"
        w = np.arange(4.0).reshape(2, 2)
        path.write_text(json.dumps(prices_to_dict(diag2, [1.0, 2.0], [3.0, 4.0], w)))
        u, v, w2 = parse_prices(path, diag2)
        assert u.tolist() == [1.0, 2.0] and v.tolist() == [3.0, 4.0]
        np.testing.assert_array_equal(w2, w)

    def test_script_roundtrip(self, tmp_path):
        _, script = market_scenario()
        path = tmp_path / "script.json"
        serialize_script(script, path)
        assert parse_script(path) == script


class TestTrace:
    def test_three_rows(self, tmp_path):
        res = run_primal(generate_random_instance(3, 3, 7), stop=StopRule(3, 1e-12, 1e-12))
        path = tmp_path / "t.csv"
        emit_trace(res.trace, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 4
        assert lines[0] == "k,objective,primal_residual,consensus_delta"
        assert float(lines[1].split(",")[1]) == res.trace.objective[0]

    def test_oracle_columns(self, tmp_path):
        inst = generate_random_instance(3, 3, 7)
        oracle = solve_oracle(inst)
        res = run_primal(inst, stop=StopRule(5, 1e-12, 1e-12), oracle=oracle, keep_snapshots=True)
        path = tmp_path / "t.csv"
        emit_trace(res.trace, path)
        header, first = path.read_text().splitlines()[:2]
        assert header.split(",")[-2:] == ["oracle_gap", "plan_residual"]
        expected = np.linalg.norm(res.trace.snapshots[0].consensus - oracle.plan)
        assert float(first.split(",")[-1]) == expected

    def test_empty_trace(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            emit_trace(IterationTrace(), tmp_path / "t.csv")


class TestCli:
    def test_gen_and_solve(self, tmp_path, capsys):
        inst = tmp_path / "i.json"
        assert main(["gen", "--targets", "3", "--sources", "3", "--seed", "5", "-o", str(inst)]) == 0
        trace, plan = tmp_path / "t.csv", tmp_path / "p.json"
        code = main(["solve-primal", "--instance", str(inst), "--trace", str(trace), "--plan-out", str(plan),
                     "--oracle"])
        assert code == 0
        assert trace.exists() and plan.exists()
        capsys.readouterr()
        assert main(["solve-dual", "--instance", str(inst), "--dual-out", str(tmp_path / "d.json"),
                     "--plan-out", str(tmp_path / "dp.json")]) == 0
        assert main(["certify", "--instance", str(inst), "--plan", str(tmp_path / "dp.json"),
                     "--dual", str(tmp_path / "d.json")]) == 0
        assert main(["check-equivalence", "--instance", str(inst), "--iterations", "50"]) == 0
        assert main(["check-equivalence", "--instance", str(inst), "--iterations", "50", "--eta-hat", "3"]) == 2
        assert main(["oracle", "--instance", str(inst), "--method", "lp"]) == 0
        out = capsys.readouterr().out
        assert '"method": "simplex"' in out

    def test_not_converged_exit_code(self, tmp_path):
        inst = tmp_path / "i.json"
        main(["gen", "--targets", "4", "--sources", "4", "--seed", "1", "-o", str(inst)])
        assert main(["solve-primal", "--instance", str(inst), "--max-iter", "3"]) == 2

    def test_error_exit_code(self, tmp_path, capsys):
        assert main(["solve-primal", "--instance", str(tmp_path / "missing.json")]) == 1
        assert "error" in capsys.readouterr().err

    def test_online(self, tmp_path):
        inst, script = market_scenario(phase_length=300)
        ipath, spath = tmp_path / "i.json", tmp_path / "s.json"
        serialize_instance(inst, ipath)
        serialize_script(script, spath)
        trace = tmp_path / "t.csv"
        assert main(["solve-online", "--instance", str(ipath), "--script", str(spath), "--iterations", "3000",
                     "--trace", str(trace)]) == 0
        header = trace.read_text().splitlines()[0]
        assert header.endswith(",phase")

    def test_bad_eta_rejected(self):
        with pytest.raises(SystemExit):
            main(["solve-primal", "--instance", "x", "--eta", "-1"])
