"""Self-check suites behind ``nlcnn verify``: oracles, gradients, shapes, params."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import functional as F
from . import oracles
from .gradcheck import check_gradients
from .network import (PRESET_NAMES, build_model, count_parameters, insertion_parameter_count, preset_spec,
                      stage_output_shapes)
from .nonlocal_block import NonLocalBlockParams, Variant, nonlocal_forward, nonlocal_oracle
from .objectives import AmSoftmaxHead, AngularProtoHead, ams_loss, ap_loss
from .tensor import Tensor, no_grad

BASELINE_PAPER_COUNT = 1.40e6
VAR2_PAPER_DELTA = 0.04e6
SHAPE_LENGTHS = (8, 64, 200, 398)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {self.detail}".rstrip()


def _random_block(rng, c, variant, dtype=np.float64):
    p = NonLocalBlockParams.initialize(c, variant, rng, dtype=dtype)
    p.z_w.data = rng.normal(0.0, 0.5, size=p.z_w.shape)
    return p


def nonlocal_equivalence(variant, instances: int = 200, seed: int = 0) -> float:
    """Largest |fast - loop oracle| over random small instances."""
    rng = np.random.default_rng([seed, list(Variant).index(Variant.parse(variant))])
    worst = 0.0
    for _ in range(instances):
        N, C, H, W = (int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 7)),
                      int(rng.integers(1, 9)))
        p = _random_block(rng, C, variant)
        x = rng.normal(size=(N, C, H, W))
        fast = nonlocal_forward(p, Tensor(x)).data
        worst = max(worst, float(np.max(np.abs(fast - nonlocal_oracle(p, x)))))
    return worst


def suite_oracles(instances: int = 200) -> List[CheckResult]:
    out = []
    for v in Variant:
        err = nonlocal_equivalence(v, instances)
        out.append(CheckResult(f"nonlocal[{v.value}]", err < 1e-10, f"instances={instances} max_abs_diff={err:.3e}"))
    rng = np.random.default_rng(1)
    worst = {"matmul": 0.0, "conv2d": 0.0, "softmax": 0.0, "batchnorm2d": 0.0}
    for _ in range(100):
        m, k, n = rng.integers(1, 7, size=3)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        worst["matmul"] = max(worst["matmul"], np.max(np.abs(F.matmul(Tensor(a), Tensor(b)).data
                                                               - oracles.matmul_loop(a, b))))
        C, O = rng.integers(1, 4, size=2)
        H, W = rng.integers(3, 7, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        stride = tuple(int(s) for s in rng.integers(1, 3, size=2))
        pad = tuple(int(s) for s in rng.integers(0, 2, size=2))
        x, w = rng.normal(size=(1, C, H, W)), rng.normal(size=(O, C, kh, kw))
        worst["conv2d"] = max(worst["conv2d"], np.max(np.abs(F.conv2d(Tensor(x), Tensor(w), stride, pad).data
                                                               - oracles.conv2d_loop(x, w, stride, pad))))
        v = rng.normal(scale=5.0, size=(int(rng.integers(1, 4)), int(rng.integers(1, 9))))
        worst["softmax"] = max(worst["softmax"], np.max(np.abs(F.softmax(Tensor(v), axis=-1).data
                                                                 - oracles.softmax_direct(v))))
        xb = rng.normal(size=(2, 3, 3, 4)) * 3 + 1
        g, be = rng.normal(size=3), rng.normal(size=3)
        got = F.batchnorm2d(Tensor(xb), Tensor(g), Tensor(be), F.BatchNormState.fresh(3)).data
        worst["batchnorm2d"] = max(worst["batchnorm2d"], np.max(np.abs(got - oracles.batchnorm_formula(xb, g, be))))
    for name, err in worst.items():
        out.append(CheckResult(f"{name}", err < 1e-10, f"instances=100 max_abs_diff={err:.3e}"))
    return out


# Sharp attention makes the untrained network's ReLU pattern change within
# ~1e-7 of a random input, so the whole-network check uses a finer step.
FULL_NETWORK_STEP = 1e-8


def full_network_gradient(seed: int = 0, T: int = 16, step: float = FULL_NETWORK_STEP) -> float:
    """Relative gradient error of a scalar loss w.r.t. the input of the 3-block model."""
    model = build_model("nlcnn-3", seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.endswith("z_w"):
            p.data = rng.normal(0.0, 0.3, size=p.shape)
    probe = rng.normal(size=(1, 512))
    x = Tensor(rng.normal(size=(1, 1, 40, T)))
    return check_gradients(lambda t: F.sum(F.mul(model.embed(t), Tensor(probe))), x, step)


def gradient_errors(seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    errs: Dict[str, float] = {}
    for v in Variant:
        p = _random_block(rng, 3, v)
        probe = Tensor(rng.normal(size=(2, 3, 3, 4)))
        errs[f"nonlocal[{v.value}]"] = check_gradients(
            lambda t, p=p, probe=probe: F.sum(F.mul(nonlocal_forward(p, t), probe)),
            Tensor(rng.normal(size=(2, 3, 3, 4))))
    model = build_model("baseline", seed=seed, dtype=np.float64)
    sap_probe = Tensor(rng.normal(size=(2, 128)))
    errs["sap"] = check_gradients(lambda t: F.sum(F.mul(model.sap(t), sap_probe)),
                                  Tensor(rng.normal(size=(2, 128, 5, 4))))
    head = AmSoftmaxHead.initialize(8, 4, rng, dtype=np.float64)
    labels = [0, 1, 2, 3, 1, 2]
    errs["ams"] = check_gradients(lambda t: ams_loss(head, t, labels), Tensor(rng.normal(size=(6, 8))))
    ap = AngularProtoHead.initialize(dtype=np.float64)
    errs["ap"] = check_gradients(lambda t: ap_loss(ap, t, 3), Tensor(rng.normal(size=(9, 8))))
    errs["network[nlcnn-3]"] = full_network_gradient(seed)
    return errs


def suite_gradients() -> List[CheckResult]:
    out = []
    for name, err in gradient_errors().items():
        limit = 1e-3 if name.startswith("network") else 1e-4
        out.append(CheckResult(f"grad {name}", err < limit, f"max_rel_err={err:.3e} limit={limit:g}"))
    return out


def table1_expected(T: int) -> Dict[str, tuple]:
    """Output column of the architecture table, integer floors on the time axis."""
    return {"conv1": (16, 20, T), "conv2_x": (16, 20, T), "conv3_x": (32, 10, T // 2),
            "conv4_x": (64, 5, T // 4), "conv5_x": (128, 5, T // 4)}


def observed_shapes(model, T: int) -> Dict[str, tuple]:
    trace: Dict[str, tuple] = {}
    model.eval()
    with no_grad():
        model.forward_features(Tensor(np.zeros((1, 1, 40, T), dtype=model.dtype)), trace)
    return {k: v[1:] for k, v in trace.items()}


def suite_shapes(lengths=SHAPE_LENGTHS) -> List[CheckResult]:
    out = []
    for preset in ("baseline", "var2"):
        model = build_model(preset, seed=0)
        for T in lengths:
            got = observed_shapes(model, T)
            want = table1_expected(T)
            ok = got == want and stage_output_shapes(T) == want
            detail = " ".join(f"{k}={'x'.join(map(str, v))}" for k, v in got.items())
            out.append(CheckResult(f"shapes {preset} T={T}", ok, detail))
    return out


def parameter_report() -> Dict[str, Dict[str, int]]:
    base = count_parameters(build_model("baseline"))
    report = {}
    for name in PRESET_NAMES:
        spec = preset_spec(name)
        total = count_parameters(build_model(spec))
        widths = {s.name: s.channels for s in spec.stages}
        closed = sum(insertion_parameter_count(i, widths[i.stage]) for i in spec.insertions)
        report[name] = {"total": total, "delta": total - base, "closed_form_delta": closed}
    return report


def suite_params() -> List[CheckResult]:
    report = parameter_report()
    base = report["baseline"]["total"]
    out = [CheckResult("params baseline", abs(base - BASELINE_PAPER_COUNT) <= 0.2 * BASELINE_PAPER_COUNT,
                       f"count={base} reference=1.40M ratio={base / BASELINE_PAPER_COUNT:.3f} tolerance=20%")]
    for name, r in report.items():
        if name == "baseline":
            continue
        out.append(CheckResult(f"params {name}", r["delta"] == r["closed_form_delta"],
                               f"count={r['total']} delta={r['delta']} closed_form={r['closed_form_delta']}"))
    d = report["var2"]["delta"]
    out.append(CheckResult("params var2-delta", abs(d - VAR2_PAPER_DELTA) <= 0.15 * VAR2_PAPER_DELTA,
                           f"delta={d} reference=0.04M ratio={d / VAR2_PAPER_DELTA:.3f} tolerance=15%"))
    return out


SUITES: Dict[str, Callable[[], List[CheckResult]]] = {
    "oracles": suite_oracles,
    "gradients": suite_gradients,
    "shapes": suite_shapes,
    "params": suite_params,
}


def run_suite(name: str, emit: Callable[[str], None] = print) -> bool:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    ok = True
    for result in SUITES[name]():
        emit(result.line())
        ok &= result.passed
    return ok
