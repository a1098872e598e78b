#!/usr/bin/env python3
"""End-to-end smoke test of the Python bindings.

Run after `pip install -e python/ --no-build-isolation`:

    python3 python/smoke.py
"""

import pmcl_py


def main():
    print(f"build: {pmcl_py.build_id()}")

    faults = pmcl_py.fault_names()
    assert "F-RENAME-INPLACE" in faults and len(faults) == 8, faults

    # Exhaustive generation has fixed counts.
    assert len(pmcl_py.generate(1)) == 56
    assert len(pmcl_py.generate(2)) == 3136
    assert len(pmcl_py.generate(3, metadata_only=True)) == 39304

    # Workload text round-trips through the validator.
    wl = "creat f\npwrite f 0 100\nsetup-done\nrename f g\n"
    assert pmcl_py.canonicalize(wl) == wl
    try:
        pmcl_py.canonicalize("bogus-verb x\n")
        raise AssertionError("parse should have failed")
    except ValueError:
        pass

    # The fixed build passes everything; a faulty build yields reports.
    clean = pmcl_py.run_workload(wl)
    assert clean["reports"] == [], clean["reports"]
    assert clean["stats"]["states_checked"] > 0

    bad = pmcl_py.run_workload(wl, faults="F-RENAME-INPLACE")
    assert bad["reports"], "expected findings from the faulty build"
    report = bad["reports"][0]
    assert "verdict: MISMATCH" in report

    # Reports reproduce their verdicts.
    replay = pmcl_py.repro(report)
    assert replay["verdict"] == "MISMATCH", replay

    # Identical reports share a cluster.
    rows = pmcl_py.cluster([report, report])
    assert len(rows) == 1 and rows[0]["members"] == [0, 1], rows

    # A short deterministic fuzzing campaign.
    fz = pmcl_py.fuzz_campaign(budget=12, faults="F-RENAME-INPLACE", seed=1)
    again = pmcl_py.fuzz_campaign(budget=12, faults="F-RENAME-INPLACE", seed=1)
    assert fz["executed"] + fz["discarded"] == 12
    assert fz["reports"] == again["reports"]
    print(
        f"fuzz: {fz['executed']} executed, {len(fz['reports'])} report(s), "
        f"{len(fz['clusters'])} cluster(s)"
    )

    print("smoke: all checks passed")


if __name__ == "__main__":
    main()
