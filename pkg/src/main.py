import json
from pathlib import Path

from actions import context, core

import functions
from config import ConfigError, load_experiment_config
from pipeline import ABLATION_TABLES, PipelineError, run_ablation, run_wssod_pipeline

version: str = core.get_version()
core.info(f"Starting DExTeR Action - \033[32;1m{version}")


# Inputs

config_file: str = core.get_input("config") or ""
core.info(f"config: \033[36;1m{config_file or '(defaults)'}")
mode: str = core.get_input("mode") or "run"
core.info(f"mode: \033[35;1m{mode}")
tables: list[str] = (core.get_input("tables") or " ".join(ABLATION_TABLES)).split()
core.info(f"tables: \033[35;1m{' '.join(tables)}")
out: str = core.get_input("out") or ""
core.info(f"out: \033[36;1m{out or '(from config)'}")
seed: str = core.get_input("seed") or ""
core.info(f"seed: \033[33;1m{seed or '(from config)'}")
summary: bool = core.get_bool("summary")
core.info(f"summary: \033[33;1m{summary}")


# Debug

with core.group("uv"):
    functions.check_output("uv -V", False)
    functions.check_output("uv python dir", False)


ctx = {k: v for k, v in vars(context).items() if not k.startswith("__")}
ctx.pop("os", None)
with core.group("GitHub Context Data"):
    core.info(json.dumps(ctx, indent=4, default=str))


# Action Logic

if mode not in ("run", "ablate"):
    core.set_failed(f"Unknown mode: {mode}. Supported: run, ablate")
    raise SystemExit(1)
unknown_tables = [t for t in tables if t not in ABLATION_TABLES]
if unknown_tables:
    core.set_failed(f"Unknown ablation tables: {', '.join(unknown_tables)}")
    raise SystemExit(1)

try:
    cfg = load_experiment_config(config_file or None, out_dir=out or None, seed=int(seed) if seed else None)
    with core.group("Experiment Config"):
        core.info(Path(config_file).read_text() if config_file else "(defaults)")
    report = run_wssod_pipeline(cfg) if mode == "run" else run_ablation(cfg, tables)
except (ConfigError, PipelineError) as e:
    core.set_failed(f"DExTeR error: {e}")
    raise SystemExit(1) from e

for note in report.notes:
    core.warn(note)
with core.group("Results"):
    core.info(json.dumps(report.rows, indent=2, default=str))


# Outputs

core.set_output("report_dir", str(report.out_dir))
core.set_output("metrics", json.dumps(report.rows, separators=(",", ":")))
core.info(f"Set outputs: report_dir={report.out_dir}, metrics rows={len(report.rows)}")


# Summary

if summary:
    inputs_table = ["<table><tr><th>Input</th><th>Value</th></tr>"]
    for name, value in [("config", config_file), ("mode", mode), ("out", str(report.out_dir)), ("seed", seed)]:
        inputs_table.append(f"<tr><td>{name}</td><td>{value or '-'}</td></tr>")
    inputs_table.append("</table>")

    if mode == "run":
        columns = ["seed", "fraction", "arm", "model"]
    else:
        columns = ["table", "setting", "seed", "fraction"]
    results_table = ["<table><tr>" + "".join(f"<th>{c}</th>" for c in columns) + "<th>mAP</th><th>mAP@50</th></tr>"]
    for row in report.rows:
        cells = "".join(f"<td>{row[c]}</td>" for c in columns)
        results_table.append(f"<tr>{cells}<td>{row['map']:.2f}</td><td>{row['map50']:.2f}</td></tr>")
    results_table.append("</table>")

    core.summary("### DExTeR Action Results")
    core.summary(f"**Mode:** `{mode}`")
    core.summary(f"**Report directory:** `{report.out_dir}`")
    core.summary(f"\n{''.join(results_table)}\n")
    for note in report.notes:
        core.summary(f"> {note}")
    core.summary(f"<details><summary>Inputs</summary>{''.join(inputs_table)}</details>\n")


print("\033[32;1mDExTeR Action completed successfully")
