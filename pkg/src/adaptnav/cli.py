"""Command line entry point: ``adaptnav <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 router protocol violation.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .an_agent import ANSystem, dump_embeddings
from .gatnet import write_attention_csv
from .harness import (ConfigError, RunReport, ScenarioConfig, compare, evaluate, format_table,
                      load_config, make_scenario, params_digest, run_experiment, train)
from .hhan import HHANSystem, write_gce_trace
from .mesosim import ProtocolViolation
from .netgraph import build_grid, save_network

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL = 0, 2, 3


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[item.split("=", 1)[0]] = item.split("=", 1)[1]
    if overrides:
        text = cfg.to_text() + "".join(f"{k} = {v}\n" for k, v in overrides.items())
        cfg = ScenarioConfig.from_text(text)
    return cfg


def _load_model(cfg: ScenarioConfig, checkpoint: str | None):
    scn = make_scenario(cfg)
    if checkpoint:
        if not hasattr(scn.model, "load"):
            raise ConfigError(f"model {cfg.model} has no checkpoint")
        scn.model.load(checkpoint)
    return scn


def cmd_gen_net(args) -> int:
    net = build_grid(args.rows, args.cols, args.edge_len, args.speed, args.lanes)
    save_network(net, args.out)
    print(f"wrote {net.n_intersections} intersections, {net.n_roads} roads to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)

    def log(e):
        if args.verbose:
            print(f"episode {e.episode} eps {e.epsilon:.3f} avtt {e.avtt} rsr {e.rsr} loss {e.loss}",
                  flush=True)

    report, _ = run_experiment(cfg, args.out, callback=log)
    print(f"{cfg.model}: median AVTT {report.median_avtt:.2f}  mean RSR {report.mean_rsr:.2f}  "
          f"({report.wall_clock:.0f}s) -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    scn = _load_model(cfg, args.checkpoint)
    reports = evaluate(scn)
    evaluation = [dict(seed=int(s), **r.summary()) for s, r in zip(cfg.eval_seeds, reports)]
    rep = RunReport(cfg.to_text(), [], evaluation, params_digest(scn.model), 0.0, cfg.model)
    if args.out:
        rep.write_json(args.out)
    print(f"{cfg.model}: median AVTT {rep.median_avtt:.2f}  mean RSR {rep.mean_rsr:.2f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = {}
    for path in args.reports:
        rep = RunReport.read_json(path)
        reports[rep.model or Path(path).stem] = rep
    print(format_table(compare(reports)))
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    cfg = _config(args)
    scn = _load_model(cfg, args.checkpoint)
    if not isinstance(scn.model, ANSystem):
        raise ConfigError("dump-embeddings needs an AN model")
    emb = dump_embeddings(scn.model, args.out)
    print(f"wrote {emb.shape[0]} embeddings of width {emb.shape[1]} to {args.out}")
    return EXIT_OK


def cmd_dump_attention(args) -> int:
    cfg = _config(args)
    scn = _load_model(cfg, args.checkpoint)
    an = scn.model
    if not isinstance(an, ANSystem) or an.gat.hops == 0:
        raise ConfigError("dump-attention needs an AN model with hops >= 1")
    an.training, an.epsilon = False, 0.0
    sim = scn.simulation(args.seed)
    snaps = sorted(set(args.snapshots))
    for i, t in enumerate(snaps):
        while sim.t < t and not sim.finished():
            sim.step(an)
        recs = an.gat.attention(an.gat_params, sim.network_state_matrix())
        write_attention_csv(args.out, recs, snapshot=int(sim.t), append=i > 0)
    print(f"wrote attention for snapshots {snaps} to {args.out}")
    return EXIT_OK


def cmd_dump_gce(args) -> int:
    cfg = _config(args).replace(model="HHAN")
    scn = _load_model(cfg, args.checkpoint)
    hh: HHANSystem = scn.model
    hh.keep_transitions = True
    train(scn, episodes=args.episodes)
    write_gce_trace(args.out, hh.transitions)
    print(f"wrote {len(hh.transitions)} GCE transitions to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptnav", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="flat key = value scenario file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        return sp

    g = sub.add_parser("gen-net", help="write a grid network file")
    g.add_argument("--rows", type=int, default=5)
    g.add_argument("--cols", type=int, default=6)
    g.add_argument("--edge-len", type=float, default=100.0)
    g.add_argument("--speed", type=float, default=13.89)
    g.add_argument("--lanes", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_net)

    t = with_config(sub.add_parser("train", help="train (if learnable) and evaluate"))
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = with_config(sub.add_parser("eval", help="evaluate a checkpoint or baseline"))
    e.add_argument("--checkpoint")
    e.add_argument("--out", help="report JSON path")
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="tabulate report JSON files")
    c.add_argument("reports", nargs="+")
    c.set_defaults(fn=cmd_compare)

    d = with_config(sub.add_parser("dump-embeddings", help="AN destination embeddings CSV"))
    d.add_argument("--checkpoint")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_dump_embeddings)

    a = with_config(sub.add_parser("dump-attention", help="GAT attention weights CSV"))
    a.add_argument("--checkpoint")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--snapshots", type=int, nargs="+", default=[100])
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_dump_attention)

    q = with_config(sub.add_parser("dump-gce", help="train HHAN and write its GCE trace"))
    q.add_argument("--checkpoint")
    q.add_argument("--episodes", type=int, default=1)
    q.add_argument("--out", required=True)
    q.set_defaults(fn=cmd_dump_gce)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolViolation as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
