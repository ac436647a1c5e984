import os

os.environ.setdefault("POT_BACKEND_DISABLE_TENSORFLOW", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_PYTORCH", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_JAX", "1")
os.environ.setdefault("POT_BACKEND_DISABLE_CUPY", "1")

from hypothesis import HealthCheck, settings  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, title, part, ok, detail):
    """Store one sub-check of an acceptance criterion for the end-of-run table."""
    ACCEPTANCE.setdefault(number, {"title": title, "parts": []})["parts"].append((part, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        entry = ACCEPTANCE[number]
        ok = all(p[1] for p in entry["parts"])
        details = "; ".join(f"{p[0]}: {'ok' if p[1] else 'FAIL'} ({p[2]})" for p in entry["parts"])
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {entry['title']} -- {details}")
