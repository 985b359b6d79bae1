import csv
import json

import numpy as np
import pytest

import cfrs.cli as cli


def desk_system(seed=3):
    return {
        "L": 4, "K": 2, "N": 2, "tau_p": 2, "tau_c": 20,
        "pilot_power": "20 dBm", "downlink_power": "23 dBm",
        "noise_ul": "-96 dBm", "noise_dl": "-96 dBm",
        "symbol_duration_s": 1e-05, "carrier_hz": 2e9,
        "osc_constant_ap": 1e-18, "osc_constant_ue": 1e-18,
        "area_side_m": 100.0, "seed": seed,
    }


def write_spec(tmp_path, data, name="exp.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def read_csv(path):
    with open(path) as fh:
        schema = fh.readline()
        assert schema.startswith("# schema=")
        return list(csv.DictReader(fh)), schema.strip()


# ---------------------------------------------------------------------------
# unit parsing
# ---------------------------------------------------------------------------

def test_dbm_to_watts():
    assert cli.parse_power("20 dBm") == pytest.approx(0.1)
    assert cli.parse_power("23dBm") == pytest.approx(10 ** 2.3 / 1000)
    assert cli.parse_power("-96 dBm") == pytest.approx(10 ** -9.6 / 1000)
    assert cli.parse_power(0.25) == 0.25
    assert cli.parse_power("0.5 W") == 0.5


def test_db_to_linear_variance():
    assert cli.parse_variance("-20 dB") == pytest.approx(0.01)
    assert cli.parse_variance("0 dB") == 1.0
    assert cli.parse_variance(3e-4) == 3e-4


def test_bad_units_rejected():
    with pytest.raises(cli.ConfigError):
        cli.parse_power("ten dBm")
    with pytest.raises(cli.ConfigError):
        cli.parse_variance("loud")


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_missing_required_key_named(tmp_path):
    system = desk_system()
    del system["L"]
    path = write_spec(tmp_path, {"system": system, "schemes": [
        {"private": "du_mr", "transmission": "coherent", "rs": False}]})
    with pytest.raises(cli.ConfigError, match="'L'"):
        cli.parse_config(path)


def test_unknown_key_rejected(tmp_path):
    system = desk_system()
    system["bandwidth"] = 20e6
    path = write_spec(tmp_path, {"system": system, "schemes": [
        {"private": "du_mr", "transmission": "coherent", "rs": False}]})
    with pytest.raises(cli.ConfigError, match="bandwidth"):
        cli.parse_config(path)


def test_json_error_reports_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "system": [,]\n}')
    with pytest.raises(cli.ConfigError, match="line 2"):
        cli.parse_config(path)


def test_unknown_scheme_fields_rejected(tmp_path):
    path = write_spec(tmp_path, {
        "system": desk_system(),
        "schemes": [{"private": "du_mr", "transmission": "coherent",
                     "rs": False, "beams": 7}],
    })
    with pytest.raises(cli.ConfigError, match="beams"):
        cli.parse_config(path)


def test_spec_roundtrip(tmp_path):
    data = {
        "system": desk_system(),
        "sweep": {"parameter": "oscillator_variance", "values": ["-30 dB", 1e-4]},
        "schemes": [
            {"private": "du_mr", "transmission": "coherent", "rs": True,
             "weights": "robust"},
            {"private": "df_mr", "transmission": "noncoherent", "rs": False},
        ],
        "mc_realizations": 100,
        "repetitions": 2,
        "output": "somewhere",
    }
    first = cli.parse_config(write_spec(tmp_path, data))
    canonical = cli.spec_to_dict(first)
    second = cli.parse_config(write_spec(tmp_path, canonical, name="canon.json"))
    assert first == second


# ---------------------------------------------------------------------------
# experiment runs
# ---------------------------------------------------------------------------

def test_minimal_run_has_k_rows(tmp_path):
    spec = cli.spec_from_dict({
        "system": desk_system(),
        "schemes": [{"private": "du_mr", "transmission": "coherent", "rs": False}],
        "output": str(tmp_path / "out"),
    })
    out = cli.run_experiment(spec)
    rows, schema = read_csv(out / "results.csv")
    assert schema == f"# schema={cli.RESULTS_SCHEMA}"
    assert len(rows) == spec.base.K
    assert all(r["status"] == "ok" for r in rows)
    assert all(r["se_common_per_ue"] == "0.0" for r in rows)


def test_rho_sweep_consistency(tmp_path):
    spec = cli.spec_from_dict({
        "system": desk_system(seed=11),
        "sweep": {"parameter": "rho", "values": [0.0, 0.3, 0.6, 0.9]},
        "schemes": [
            {"private": "du_mr", "transmission": "coherent", "rs": True},
            {"private": "du_mr", "transmission": "coherent", "rs": False},
        ],
        "output": str(tmp_path / "out"),
    })
    out = cli.run_experiment(spec)
    rows, _ = read_csv(out / "results.csv")
    by_rho_rs = {}
    nors_sse = None
    for r in rows:
        if r["rs"] == "1":
            by_rho_rs[float(r["sweep_value"])] = float(r["sum_se"])
        else:
            nors_sse = float(r["sum_se"])
    # rho = 0 with splitting enabled equals the plain non-split sum SE
    assert by_rho_rs[0.0] == nors_sse
    # splitting helps at some interior point on this instance
    assert max(by_rho_rs.values()) > by_rho_rs[0.0]
    assert max(by_rho_rs, key=by_rho_rs.get) > 0.0


def test_oscillator_sweep_sum_se_monotone(tmp_path):
    # growing phase-drift variance must only hurt coherent transmission
    spec = cli.spec_from_dict({
        "system": desk_system(seed=21),
        "sweep": {"parameter": "oscillator_variance",
                  "values": ["-50 dB", "-40 dB", "-30 dB", "-20 dB"]},
        "schemes": [{"private": "du_mr", "transmission": "coherent", "rs": False}],
        "repetitions": 3,
        "output": str(tmp_path / "out"),
    })
    out = cli.run_experiment(spec)
    rows, _ = read_csv(out / "aggregate.csv")
    by_var = sorted((float(r["sweep_value"]), float(r["mean_sum_se"])) for r in rows)
    values = [sse for _, sse in by_var]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_row_count_identity(tmp_path):
    spec = cli.spec_from_dict({
        "system": desk_system(),
        "sweep": {"parameter": "oscillator_variance", "values": [1e-4, 1e-3]},
        "schemes": [
            {"private": "du_mr", "transmission": "coherent", "rs": False},
            {"private": "df_mr", "transmission": "noncoherent", "rs": False},
        ],
        "repetitions": 3,
        "output": str(tmp_path / "out"),
    })
    out = cli.run_experiment(spec)
    rows, _ = read_csv(out / "results.csv")
    assert len(rows) == 2 * 2 * 3 * spec.base.K


def test_replay_reproduces_csv_bytes(tmp_path):
    spec_path = write_spec(tmp_path, {
        "system": desk_system(seed=5),
        "sweep": {"parameter": "rho", "values": [0.0, 0.5]},
        "schemes": [{"private": "du_mr", "transmission": "coherent", "rs": True}],
        "repetitions": 2,
        "output": str(tmp_path / "one"),
    })
    assert cli.main(["sweep", "--config", str(spec_path)]) == 0
    assert cli.main(["sweep", "--replay", str(tmp_path / "one" / "manifest.json"),
                     "--out", str(tmp_path / "two")]) == 0
    one = (tmp_path / "one" / "results.csv").read_bytes()
    two = (tmp_path / "two" / "results.csv").read_bytes()
    assert one == two
    agg1 = (tmp_path / "one" / "aggregate.csv").read_bytes()
    agg2 = (tmp_path / "two" / "aggregate.csv").read_bytes()
    assert agg1 == agg2


def test_manifest_contents(tmp_path):
    spec = cli.spec_from_dict({
        "system": desk_system(),
        "schemes": [{"private": "du_mr", "transmission": "coherent", "rs": False}],
        "repetitions": 2,
        "output": str(tmp_path / "out"),
    })
    out = cli.run_experiment(spec)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema"] == cli.MANIFEST_SCHEMA
    assert len(manifest["jobs"]) == 2
    assert cli.spec_from_dict(manifest["spec"]) == spec


def test_nmse_subcommand(tmp_path):
    out = tmp_path / "nmse.csv"
    code = cli.main([
        "nmse", "--config", str(write_spec(tmp_path, {
            "system": desk_system(),
            "schemes": [{"private": "du_mr", "transmission": "coherent", "rs": False}],
        })),
        "--variances", "-50 dB,-30 dB", "--out", str(out),
    ])
    assert code == 0
    rows, schema = read_csv(out)
    assert schema == f"# schema={cli.NMSE_SCHEMA}"
    assert len(rows) == 2 * 4 * 2  # variances * L * K
    low = [float(r["nmse_mmse"]) for r in rows if float(r["variance"]) < 1e-4]
    high = [float(r["nmse_mmse"]) for r in rows if float(r["variance"]) > 1e-4]
    assert np.mean(high) > np.mean(low)


def test_network_dump(tmp_path):
    spec_path = write_spec(tmp_path, {
        "system": desk_system(),
        "schemes": [{"private": "du_mr", "transmission": "coherent", "rs": False}],
    })
    net_out = tmp_path / "network.csv"
    code = cli.main(["se", "--config", str(spec_path),
                     "--out", str(tmp_path / "se.csv"),
                     "--dump-network", str(net_out)])
    assert code == 0
    rows, _ = read_csv(net_out)
    kinds = {r["kind"] for r in rows}
    assert kinds == {"ap", "ue", "link"}
    links = [r for r in rows if r["kind"] == "link"]
    assert len(links) == 4 * 2
    mags = [float(r["theta_re"]) ** 2 + float(r["theta_im"]) ** 2 for r in links]
    assert np.allclose(mags, 1.0)


def test_validate_subcommand(tmp_path):
    out = tmp_path / "val.csv"
    terms_out = tmp_path / "terms.csv"
    code = cli.main(["validate", "--mc", "2000", "--out", str(out),
                     "--terms-out", str(terms_out), "--seed", "2"])
    assert code == 0
    rows, _ = read_csv(out)
    assert len(rows) == 8 * 3 * 2  # families * instants * UEs
    assert all(float(r["rel_err"]) < 0.5 for r in rows)
    term_rows, _ = read_csv(terms_out)
    assert {r["term"] for r in term_rows} == {
        "ds_private", "int_private", "ds_common", "int_common"
    }


def test_failed_jobs_are_tagged_and_run_continues(tmp_path):
    # rho = 1.5 is an invalid power split: those rows carry an error tag,
    # the valid sweep point still completes
    spec = cli.spec_from_dict({
        "system": desk_system(),
        "sweep": {"parameter": "rho", "values": [0.5, 1.5]},
        "schemes": [{"private": "du_mr", "transmission": "coherent", "rs": True}],
        "output": str(tmp_path / "out"),
    })
    out = cli.run_experiment(spec)
    rows, _ = read_csv(out / "results.csv")
    assert len(rows) == 2 * spec.base.K
    by_value = {}
    for r in rows:
        by_value.setdefault(r["sweep_value"], set()).add(r["status"])
    assert by_value["0.5"] == {"ok"}
    assert by_value["1.5"] == {"error:ValueError"}


def test_single_user_run(tmp_path):
    system = desk_system()
    system["K"] = 1
    system["tau_p"] = 1
    spec = cli.spec_from_dict({
        "system": system,
        "schemes": [{"private": "du_mr", "transmission": "coherent", "rs": True,
                     "weights": "robust"}],
        "output": str(tmp_path / "out"),
    })
    out = cli.run_experiment(spec)
    rows, _ = read_csv(out / "results.csv")
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    # one UE: the common SE equals that UE's common SE
    assert rows[0]["se_common"] == rows[0]["se_common_per_ue"]


def test_sweep_requires_config():
    assert cli.main(["sweep"]) == 2  # ConfigError surfaces as exit code 2
