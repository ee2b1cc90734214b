"""Operator command line: data generation, ingestion, training, evaluation,
sweep experiments, serving, and a recommendation client.

Commands communicate through documented file formats only: tab-separated
event lines, JSON-lines article batches, CSV reports (with a PNG figure
rendered next to each report), and the record store directory. Every
subcommand is reproducible from its flags plus the seed. `--config FILE`
reads flat key=value lines that serve as defaults for any flag.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import als, content, report, synth, trainer
from .evaluation import (
    CollaborativeRecommender,
    Dataset,
    GlobalTopRecommender,
    RandomRecommender,
    precision_at_10,
    split,
    sweep_batch_size,
    sweep_parallelism,
    train_incremental,
)
from .events import (
    SignificanceRule,
    SignificanceTracker,
    format_event_line,
    read_events,
    write_events,
)
from .store import Namespace, Store
from .trainer import ModelState, TrainerConfig


def _als_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, default=50, help="factor dimension")
    p.add_argument("--alpha", type=float, default=40.0, help="confidence scale")
    p.add_argument("--lambda", dest="lam", type=float, default=0.01, help="regularization")
    p.add_argument("--cg-steps", type=int, default=3)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)


def _trainer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int, default=10000)
    p.add_argument("--min-batch-users", type=int, default=100)
    p.add_argument("--parallelism", type=int, default=1)


def _als_params(args) -> als.AlsParams:
    return als.AlsParams(
        k=args.k,
        alpha=args.alpha,
        lam=args.lam,
        cg_steps=args.cg_steps,
        epochs=args.epochs,
        seed=args.seed,
    )


def _trainer_config(args) -> TrainerConfig:
    return TrainerConfig(
        batch_size=args.batch_size,
        min_batch_users=args.min_batch_users,
        parallelism=args.parallelism,
        als=_als_params(args),
    )


def _load_dataset(events_path: str) -> Dataset:
    source = sys.stdin if events_path == "-" else events_path
    events = read_events(source)
    tracker = SignificanceTracker(SignificanceRule())
    order = []
    for ev in events:
        order.extend(tracker.feed(ev))
    return Dataset([(u, i, tracker.aggregates[(u, i)]) for u, i in order])


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    spec = synth.SyntheticSpec(
        n_users=args.users,
        n_items=args.items,
        n_clusters=args.clusters,
        popularity_skew=args.skew,
        actions_per_user=args.actions_per_user,
        seed=args.seed,
    )
    data = synth.generate_synthetic(spec)
    if args.out == "-":
        write_events(data.events, sys.stdout)
        if args.articles_out:
            content.write_articles(data.articles, args.articles_out)
        return 0
    out = _out_dir(args)
    write_events(data.events, out / "events.tsv")
    content.write_articles(data.articles, out / "articles.jsonl")
    print(
        f"wrote {len(data.events)} events ({len(data.dataset)} significant interactions) "
        f"and {len(data.articles)} articles to {out}",
        file=sys.stderr,
    )
    return 0


def cmd_ingest(args) -> int:
    source = sys.stdin if args.events == "-" else args.events
    events = read_events(source)
    with Store(args.store, sync=not args.no_sync) as store:
        start = store.count(Namespace.EVENTS)
        for offset, ev in enumerate(events):
            key = f"{start + offset:020d}"
            store.put(Namespace.EVENTS, key, format_event_line(ev).encode("utf-8"))
    print(f"ingested {len(events)} events into {args.store}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    dataset = _load_dataset(args.events)
    cfg = _trainer_config(args)
    state = ModelState(cfg.als)
    actions = [(u, i) for u, i, _ in dataset.tuples]
    with Store(args.store, sync=not args.no_sync) as store:

        def persist(bi, job, st):
            for user_id in job.row_users:
                store.put(Namespace.USER_VEC, user_id, als.vector_to_bytes(st.users[user_id]))
                store.put(
                    Namespace.RATINGS, user_id, trainer.ratings_to_bytes(st.ratings[user_id])
                )
            for item_id in job.col_items:
                store.put(Namespace.ITEM_VEC, item_id, als.vector_to_bytes(st.items[item_id]))
                store.put(
                    Namespace.POPULARITY, item_id, str(st.popularity[item_id]).encode("ascii")
                )
            store.put(Namespace.CHECKPOINT, trainer.checkpoint_key(bi), trainer.checkpoint_value(job.n_actions))

        trainer.run_stream(actions, state, cfg, on_batch=persist)

        if args.articles:
            docs = content.read_articles(args.articles)
            ranker = content.RankerConfig()
            features = {d.item_id: content.extract_features(d, ranker) for d in docs}
            rng = np.random.default_rng(cfg.als.seed + 1)
            corpus = set(features)
            trained = 0
            for user_id in sorted(state.ratings):
                rated = state.rated_items(user_id)
                positives = [features[i] for i in sorted(rated) if i in features]
                if not positives:
                    continue
                negatives_ids = content.sample_negatives(
                    rated, corpus, ranker.negative_ratio, rng
                )
                negatives = [features[i] for i in sorted(negatives_ids)]
                if not negatives:
                    continue
                try:
                    model = content.train_user_model(positives, negatives, ranker, owner=user_id)
                except content.DegenerateTrainingError:
                    continue
                store.put(Namespace.CONTENT_MODEL, user_id, content.content_model_to_bytes(model))
                trained += 1
            print(f"trained {trained} content models", file=sys.stderr)
    print(
        f"trained {len(state.users)} users x {len(state.items)} items "
        f"({len(actions)} actions) into {args.store}",
        file=sys.stderr,
    )
    return 0


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.events)
    train, test = split(dataset, args.train_fraction, args.seed)
    cfg = _trainer_config(args)
    systems = [s.strip() for s in args.systems.split(",") if s.strip()]
    reports = []
    fallback = GlobalTopRecommender(train)
    for system in systems:
        if system == "collab":
            state = train_incremental(train, cfg)
            rec = CollaborativeRecommender.from_state(state)
            reports.append(precision_at_10(rec, train, test, fallback=fallback))
        elif system == "top":
            reports.append(precision_at_10(GlobalTopRecommender(train), train, test))
        elif system == "random":
            reports.append(precision_at_10(RandomRecommender(train, args.seed), train, test))
        elif system == "content":
            reports.append(_eval_content(args, train, test, fallback))
        else:
            raise ValueError(f"unknown system {system!r}")

    lines = ["system,precision_at_10,users_evaluated"]
    lines += [f"{r.system},{r.precision_at_10:.6f},{r.users_evaluated}" for r in reports]
    print("\n".join(lines))
    if args.out != "-":
        out = _out_dir(args)
        report.write_eval_csv(out / "eval.csv", reports)
        report.render_eval_figure(out / "eval.png", reports)
        print(f"wrote {out/'eval.csv'} and {out/'eval.png'}", file=sys.stderr)
    return 0


def _eval_content(args, train: Dataset, test: Dataset, fallback) -> "report.EvalReport":
    if not args.articles:
        raise ValueError("--articles is required to evaluate the content system")
    docs = content.read_articles(args.articles)
    ranker = content.RankerConfig()
    features = {d.item_id: content.extract_features(d, ranker) for d in docs}
    train_items = train.by_user()
    catalog = {i: features[i] for i in train.items() if i in features}
    popularity = _counts(train)
    rng = np.random.default_rng(args.seed + 1)
    corpus = set(features)
    models: dict[str, content.ContentModel] = {}
    users = sorted(train_items)
    if args.max_content_users and len(users) > args.max_content_users:
        picked = rng.choice(len(users), size=args.max_content_users, replace=False)
        users = sorted(users[int(j)] for j in picked)
    for user_id in users:
        rated = train_items[user_id]
        positives = [features[i] for i in sorted(rated) if i in features]
        if not positives:
            continue
        neg_ids = content.sample_negatives(rated, corpus, ranker.negative_ratio, rng)
        negatives = [features[i] for i in sorted(neg_ids)]
        if not negatives:
            continue
        try:
            models[user_id] = content.train_user_model(positives, negatives, ranker, owner=user_id)
        except content.DegenerateTrainingError:
            continue

    class _ContentRec:
        name = "content"

        def recommend(self, user_id, exclude, n):
            if user_id not in models:
                from .evaluation import ColdUserError

                raise ColdUserError(user_id)
            ranked = content.recommend_content(
                user_id, models, catalog, popularity, exclude, n, beta=ranker.beta
            )
            return [i for i, _ in ranked]

    return precision_at_10(_ContentRec(), train, test, fallback=fallback)


def _counts(train: Dataset) -> dict[str, int]:
    out: dict[str, int] = {}
    for _, i, _ in train.tuples:
        out[i] = out.get(i, 0) + 1
    return out


def cmd_sweep_batch(args) -> int:
    dataset = _load_dataset(args.events)
    cfg = _trainer_config(args)
    n_train = int(args.train_fraction * len(dataset))
    if args.sizes == "auto":
        # ceiling division keeps the last batch of each run full-sized
        sizes = [-(-n_train // nb) for nb in (64, 16, 4, 1)]
    else:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    per_seed = []
    for offset in range(args.seeds):
        seed = args.seed + offset
        run_cfg = TrainerConfig(
            batch_size=cfg.batch_size,
            min_batch_users=args.min_batch_users,
            parallelism=cfg.parallelism,
            als=als.AlsParams(
                k=args.k, alpha=args.alpha, lam=args.lam, cg_steps=args.cg_steps,
                epochs=args.epochs, seed=seed,
            ),
        )
        per_seed.append(sweep_batch_size(dataset, sizes, run_cfg, seed, args.train_fraction))
    rows = report.mean_rows(per_seed)
    print("batch_size,precision_at_10")
    for r in rows:
        print(f"{r.x},{r.precision_at_10:.6f}")
    if args.out != "-":
        out = _out_dir(args)
        report.write_sweep_csv(out / "sweep_batch.csv", rows, "batch_size")
        report.render_batch_sweep_figure(out / "sweep_batch.png", rows)
        print(f"wrote {out/'sweep_batch.csv'} and {out/'sweep_batch.png'}", file=sys.stderr)
    return 0


def cmd_sweep_parallel(args) -> int:
    dataset = _load_dataset(args.events)
    levels = [int(s) for s in args.levels.split(",") if s.strip()]
    per_seed = []
    for offset in range(args.seeds):
        seed = args.seed + offset
        run_cfg = TrainerConfig(
            batch_size=args.batch_size,
            min_batch_users=args.min_batch_users,
            parallelism=1,
            als=als.AlsParams(
                k=args.k, alpha=args.alpha, lam=args.lam, cg_steps=args.cg_steps,
                epochs=args.epochs, seed=seed,
            ),
        )
        per_seed.append(
            sweep_parallelism(dataset, levels, args.batch_size, run_cfg, seed, args.train_fraction)
        )
    rows = report.mean_rows(per_seed)
    print("parallelism,precision_at_10")
    for r in rows:
        print(f"{r.x},{r.precision_at_10:.6f}")
    if args.out != "-":
        out = _out_dir(args)
        report.write_sweep_csv(out / "sweep_parallel.csv", rows, "parallelism")
        report.render_parallel_sweep_figure(out / "sweep_parallel.png", rows)
        print(f"wrote {out/'sweep_parallel.csv'} and {out/'sweep_parallel.png'}", file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .server import EngineConfig, RecommendationEngine, create_app

    cfg = EngineConfig(
        trainer=_trainer_config(args),
        flush_interval=args.flush_interval,
        model_ttl=args.model_ttl,
        top_ttl=args.top_ttl,
        train_content_models=not args.no_content,
    )
    store = Store(args.store, sync=not args.no_sync)
    engine = RecommendationEngine(store, cfg)
    engine.start()
    try:
        uvicorn.run(create_app(engine), host=args.host, port=args.port, log_level="info")
    finally:
        engine.close()
    return 0


def cmd_recommend(args) -> int:
    import requests

    resp = requests.get(
        f"{args.server.rstrip('/')}/recommendations",
        params={"user": args.user, "n": args.n, "algo": args.algo},
        timeout=30,
    )
    if resp.status_code != 200:
        print(f"error: server returned {resp.status_code}: {resp.text}", file=sys.stderr)
        return 1
    body = resp.json()
    if body.get("fallback"):
        print("note: served from fallback (top articles)", file=sys.stderr)
    for entry in body["items"]:
        print(f"{entry['item_id']}\t{entry['score']}")
    return 0


def _read_config_defaults(path: str) -> dict[str, str]:
    defaults = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        defaults[key.strip().replace("-", "_")] = value.strip()
    return defaults


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="newsrec", description="real-time news recommendation engine"
    )
    parser.add_argument("--config", help="flat key=value file of flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic event stream and article corpus")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--skew", type=float, default=1.2)
    p.add_argument("--actions-per-user", type=float, default=30.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory, or - for events on stdout")
    p.add_argument("--articles-out", help="with --out -, also write articles here")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", help="append an event file to the store")
    p.add_argument("--events", required=True, help="event TSV file, or - for stdin")
    p.add_argument("--store", required=True)
    p.add_argument("--no-sync", action="store_true", help="skip fsync per write")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train models offline from an event file")
    p.add_argument("--events", required=True)
    p.add_argument("--articles", help="JSONL article batch for content models")
    p.add_argument("--store", required=True)
    p.add_argument("--no-sync", action="store_true")
    _trainer_flags(p)
    _als_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="offline precision@10 evaluation")
    p.add_argument("--events", required=True)
    p.add_argument("--articles")
    p.add_argument("--systems", default="collab,top,random")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--max-content-users", type=int, default=200)
    p.add_argument("--out", default="-", help="report directory, or - for stdout only")
    _trainer_flags(p)
    _als_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-batch", help="precision@10 against batch size")
    p.add_argument("--events", required=True)
    p.add_argument("--sizes", default="auto", help="comma list, or auto for n/64,n/16,n/4,n")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds to average")
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", default="-")
    _trainer_flags(p)
    _als_flags(p)
    p.set_defaults(func=cmd_sweep_batch)

    p = sub.add_parser("sweep-parallel", help="precision@10 against parallelism")
    p.add_argument("--events", required=True)
    p.add_argument("--levels", default="1,2,4")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--out", default="-")
    _trainer_flags(p)
    _als_flags(p)
    p.set_defaults(func=cmd_sweep_parallel)

    p = sub.add_parser("serve", help="run the HTTP serving runtime")
    p.add_argument("--store", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--flush-interval", type=float, default=60.0)
    p.add_argument("--model-ttl", type=float, default=5.0)
    p.add_argument("--top-ttl", type=float, default=30.0)
    p.add_argument("--no-content", action="store_true", help="skip content-model training")
    p.add_argument("--no-sync", action="store_true")
    _trainer_flags(p)
    _als_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("recommend", help="query a running server")
    p.add_argument("--server", default="http://127.0.0.1:8321")
    p.add_argument("--user", required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--algo", default="collab", choices=["collab", "content", "top"])
    p.set_defaults(func=cmd_recommend)

    parser.subcommands = dict(sub.choices)  # type: ignore[attr-defined]
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if "--config" in argv:
        at = argv.index("--config")
        if at + 1 >= len(argv):
            parser.error("--config requires a file path")
        try:
            defaults = _coerce_defaults(_read_config_defaults(argv[at + 1]))
        except (OSError, ValueError) as exc:
            parser.error(str(exc))
        known: set[str] = set()
        for p in parser.subcommands.values():  # type: ignore[attr-defined]
            dests = {a.dest for a in p._actions}
            known |= dests
            p.set_defaults(**{k: v for k, v in defaults.items() if k in dests})
        bad = set(defaults) - known
        if bad:
            parser.error(f"unknown config keys: {sorted(bad)}")
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # tool surface: fail with a diagnostic, not a traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _coerce_defaults(defaults: dict[str, str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for key, value in defaults.items():
        if value.lower() in ("true", "false"):
            out[key] = value.lower() == "true"
            continue
        try:
            out[key] = int(value)
            continue
        except ValueError:
            pass
        try:
            out[key] = float(value)
            continue
        except ValueError:
            pass
        out[key] = value
    return out


if __name__ == "__main__":
    sys.exit(main())
