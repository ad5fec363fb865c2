"""Smoke test for the ratchet extension module.

Build and run:
    cargo build -p ratchet-py --features extension-module --release
    cp target/release/libratchet.so /tmp/ratchet.so
    PYTHONPATH=/tmp python3 crates/py/python/smoke_test.py
"""

import ratchet


def main():
    assert "walkthrough" in ratchet.scenarios()
    assert "full" in ratchet.configs()

    report = ratchet.run("walkthrough", "full", 7)
    agg = report["aggregates"]
    assert agg["tasks"] == len(report["tasks"])
    assert agg["committed"] >= 1, agg
    first = report["tasks"][0]["fdka"][0]
    assert first["decision"] == "committed", first["decision"]
    assert first["patch"]["predicate"] == "not blocked_card(?card, ?dates)"

    stress = ratchet.suite("travel-stress-12", "full", [7, 13, 31])
    assert stress["holdout_target_failure"]["mean"] == 0.0
    retry = ratchet.suite("travel-stress-12", "retry", [7, 13, 31])
    assert retry["holdout_target_failure"]["mean"] == 100.0

    rows = ratchet.audit()
    assert len(rows) == 8 and all(r["matched"] for r in rows)

    assert ratchet.tta_bound(0.8, 0.1, 0.05) == 5
    check = ratchet.tta_bound_check(0.8, 0.1, 0.05, trials=20000)
    assert check["holds"], check
    assert ratchet.arbitrate(0.1, 0.9, 5.0) == "VERIFY"

    for bad in (lambda: ratchet.run("atlantis"), lambda: ratchet.tta_bound(0.0, 0.1, 0.05)):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")

    print("ratchet", ratchet.__version__, "smoke test ok")


if __name__ == "__main__":
    main()
