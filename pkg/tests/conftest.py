import numpy as np
import pytest

import contok
import contok.model
import contok.quantizer

# every soft_quantize call made anywhere in the suite is checked against the
# telescoping identity z_hat = r_0 - r_L
TELESCOPING = {"calls": 0, "worst": 0.0, "violations": 0}
TELESCOPING_TOL = 4 * np.finfo(np.float64).eps  # per level, relative to the input scale
_original_soft_quantize = contok.quantizer.soft_quantize


def telescoping_gap(soft):
    r0 = soft.residuals[0].value
    rl = soft.residuals[-1].value
    recon = soft.recon.value
    # a diverged run carries non-finite values; the identity is about the finite ones
    ok = np.isfinite(r0) & np.isfinite(rl) & np.isfinite(recon)
    if not ok.any():
        return 0.0
    r0, rl, recon = r0[ok], rl[ok], recon[ok]
    scale = max(1.0, float(np.abs(r0).max()), float(np.abs(recon).max()))
    return float(np.abs(recon - (r0 - rl)).max()) / scale


def _checked_soft_quantize(*args, **kwargs):
    soft = _original_soft_quantize(*args, **kwargs)
    gap = telescoping_gap(soft)
    levels = len(soft.weights)
    TELESCOPING["calls"] += 1
    TELESCOPING["worst"] = max(TELESCOPING["worst"], gap)
    if gap > TELESCOPING_TOL * levels:
        TELESCOPING["violations"] += 1
        raise AssertionError(f"telescoping gap {gap:.3e} over {levels} levels")
    return soft


# installed before any test module imports the function
for _module in (contok, contok.quantizer, contok.model):
    _module.soft_quantize = _checked_soft_quantize


# acceptance criteria register a name and a detail line; the summary prints
# one pass/fail line per criterion
CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


@pytest.fixture
def detail(request):
    marker = request.node.get_closest_marker("criterion")
    name = marker.args[0] if marker else request.node.name
    notes = []

    def add(text):
        notes.append(str(text))
        print(f"[{name}] {text}")

    yield add
    CRITERIA.setdefault(name, {"outcome": None, "notes": []})["notes"] += notes


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    name = _criterion_of(report)
    if name is None:
        return
    entry = CRITERIA.setdefault(name, {"outcome": None, "notes": []})
    ok = report.passed
    entry["outcome"] = ok if entry["outcome"] is None else (entry["outcome"] and ok)


def _criterion_of(report):
    for key, value in report.user_properties:
        if key == "criterion":
            return value
    return None


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    tele = CRITERIA.get("Telescoping identity")
    if tele is not None:
        # judged over the whole session, not only the calls made before the test ran
        tele["outcome"] = bool(tele["outcome"]) and TELESCOPING["violations"] == 0
        tele["notes"] = [f"{TELESCOPING['calls']} soft_quantize calls checked, "
                         f"{TELESCOPING['violations']} violations, worst scaled gap "
                         f"{TELESCOPING['worst']:.1e}"]
    for name, entry in CRITERIA.items():
        status = {True: "PASS", False: "FAIL", None: "NOT RUN"}[entry["outcome"]]
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({notes})" if notes else ""))
