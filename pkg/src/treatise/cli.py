"""Command-line entry point.

Subcommands: segment, pipeline, vocab, enrich, index, search, eval,
overlay, mock-serve, validate. Exit codes: 0 success, 1 usage error,
2 validation or data error, 3 backend or transport error. Diagnostics go
to standard error; data goes to files or standard output.

Configuration comes from a JSON file (default ./treatise.json when
present, or --config), overridden per stage by TREATISE_<STAGE>_URL
environment variables and per run by flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from urllib.parse import urlsplit

from . import evaluation, lexicon, ontology, retrieval
from .backends import BackendError, resolve_endpoints
from .catalog import (
    ManifestError,
    SidecarFormatError,
    SidecarValidationError,
    load_manifest,
    load_sidecar,
    read_sidecar,
    record_from_obj,
    render_overlay,
    sidecar_path,
    validate_record,
    write_sidecar,
)
from .lexicon import GlossaryFormatError
from .mockserver import MockBackendServer, load_fixture_table
from .ontology import OntologyFormatError
from .pipeline import (
    PipelineConfig,
    PipelineConfigError,
    build_label_vocabulary,
    enrich_labels,
    run_pipeline,
)
from .raster import PgmError, RleError, decode_pgm, encode_pgm

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3

_METHOD_NAMES = {"m1": "M1", "m2": "M2", "m3": "M3", "m4": "M4",
                 "m4b": "M4b", "native": "native"}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this tool reserves 2 for data
    problems, so usage errors are remapped to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _err(message: str) -> None:
    print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# configuration

_CONFIG_FILE_KEYS = ("glossary", "ontology", "manifest")


def _load_config(args) -> dict:
    path = getattr(args, "config", None)
    if path is None and os.path.exists("treatise.json"):
        path = "treatise.json"
    if path is None:
        return {}
    with open(path, "rb") as fh:
        cfg = json.loads(fh.read().decode("utf-8"))
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path}: top level must be an object")
    for key in _CONFIG_FILE_KEYS:
        ref = cfg.get(key)
        if ref is not None and not os.path.exists(ref):
            raise ValueError(f"config {path}: {key} file {ref!r} does not exist")
    for stage, url in (cfg.get("endpoints") or {}).items():
        parts = urlsplit(url)
        if parts.scheme not in ("http", "https") or not parts.netloc:
            raise ValueError(f"config {path}: endpoint {stage} URL {url!r} is not valid")
    return cfg


def _opt(args, cfg: dict, name: str, default=None):
    value = getattr(args, name, None)
    if value is not None:
        return value
    value = cfg.get(name)
    return default if value is None else value


def _load_glossary(path) -> lexicon.Glossary:
    with open(path, "rb") as fh:
        return lexicon.load_glossary(fh.read())


def _load_ontology(path):
    with open(path, "rb") as fh:
        return ontology.load_ontology(fh.read())


_EMPTY_GLOSSARY = '{"entries": {}}'
_EMPTY_ONTOLOGY = '{"roots": [], "concepts": {}}'


def _knowledge(args, cfg, required=False):
    gpath = _opt(args, cfg, "glossary")
    opath = _opt(args, cfg, "ontology")
    if required and (gpath is None or opath is None):
        raise ValueError("this command needs --glossary and --ontology (flag or config)")
    glossary = _load_glossary(gpath) if gpath else None
    onto = _load_ontology(opath) if opath else None
    return glossary, onto


def _pipeline_config(args, cfg: dict) -> PipelineConfig:
    method_name = _opt(args, cfg, "method")
    if method_name is None:
        raise ValueError("no method given (flag --method or config key)")
    method = _METHOD_NAMES.get(str(method_name).lower())
    if method is None:
        raise ValueError(f"unknown method {method_name!r}")
    return PipelineConfig(
        method=method,
        endpoints=dict(cfg.get("endpoints") or {}),
        segmentation_stage=_opt(args, cfg, "seg_stage",
                                cfg.get("segmentation_stage", "before_labeling")),
        vocabulary_path=_opt(args, cfg, "vocabulary", cfg.get("vocabulary_path")),
        tag_vocabulary=tuple(cfg.get("tag_vocabulary") or ()),
        max_tags=int(_opt(args, cfg, "max_tags", 32)),
        timeout=float(_opt(args, cfg, "timeout", 10.0)),
        domain_context=cfg.get("domain_context", "shipbuilding or nautical"),
        language=str(_opt(args, cfg, "language", "en")),
        h_threshold=int(_opt(args, cfg, "h", 0)),
        relief=_opt(args, cfg, "relief", "gradient"),
    )


# ---------------------------------------------------------------------------
# subcommands

def _cmd_segment(args) -> int:
    cfg = _load_config(args)
    config = PipelineConfig(method="native",
                            relief=_opt(args, cfg, "relief", "gradient"),
                            h_threshold=int(_opt(args, cfg, "h", 0)))
    with open(args.infile, "rb") as fh:
        blob = fh.read()
    record = run_pipeline(blob, config, source_path=args.infile)
    out = args.out or sidecar_path(args.infile)
    write_sidecar(record, out)
    _err(f"{len(record.segments)} segments -> {out}")
    return EXIT_OK


def _cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    config = _pipeline_config(args, cfg)
    glossary, onto = _knowledge(args, cfg)
    manifest_path = _opt(args, cfg, "manifest")
    if args.infile is None and manifest_path is None:
        raise ValueError("need --in IMAGE or --manifest MANIFEST")
    if args.infile is not None:
        with open(args.infile, "rb") as fh:
            blob = fh.read()
        record = run_pipeline(blob, config, glossary, onto, source_path=args.infile)
        out = args.out or sidecar_path(args.infile)
        write_sidecar(record, out)
        _err(f"{len(record.segments)} segments, "
             f"{sum(len(v) for v in record.assignments.values())} labels -> {out}")
        return EXIT_OK
    return _run_corpus(manifest_path, config, glossary, onto,
                       force=args.force, workers=args.workers)


def _run_corpus(manifest_path, config, glossary, onto, force=False, workers=None) -> int:
    with open(manifest_path, "rb") as fh:
        manifest = load_manifest(fh.read())
    base = os.path.dirname(os.path.abspath(manifest_path))
    images = [os.path.join(base, rel)
              for t in manifest.treatises for rel in t.images]

    def work(path):
        out = sidecar_path(path)
        if os.path.exists(out) and not force:
            return "skipped", None
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
            record = run_pipeline(blob, config, glossary, onto, source_path=path)
            write_sidecar(record, out)
            return "processed", None
        except Exception as exc:  # per-image isolation: failures never abort the run
            return "failed", exc

    counts = {"processed": 0, "failed": 0, "skipped": 0}
    backend_failure = False
    max_workers = workers or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for path, (status, exc) in zip(images, pool.map(work, images)):
            counts[status] += 1
            if exc is not None:
                _err(f"{path}: {exc}")
                if isinstance(exc, BackendError):
                    backend_failure = True
    print(f"processed={counts['processed']} failed={counts['failed']} "
          f"skipped={counts['skipped']}")
    if counts["failed"]:
        return EXIT_BACKEND if backend_failure else EXIT_DATA
    return EXIT_OK


def _cmd_vocab(args) -> int:
    cfg = _load_config(args)
    gpath = _opt(args, cfg, "glossary")
    if gpath is None:
        raise ValueError("vocab needs --glossary (flag or config)")
    glossary = _load_glossary(gpath)
    endpoints = resolve_endpoints(cfg.get("endpoints") or {})
    seed = build_label_vocabulary(
        glossary,
        definer_url=endpoints.get("define"),
        language=_opt(args, cfg, "language", "en"),
        cache_path=args.out,
        domain_context=cfg.get("domain_context", "shipbuilding or nautical"),
        timeout=float(_opt(args, cfg, "timeout", 10.0)),
    )
    _err(f"{len(seed.entries)} terms -> {args.out}")
    return EXIT_OK


def _cmd_enrich(args) -> int:
    cfg = _load_config(args)
    glossary, onto = _knowledge(args, cfg, required=True)
    record = load_sidecar(args.infile)
    enriched = replace(record, assignments=enrich_labels(record.assignments, glossary, onto))
    out = args.out or args.infile
    write_sidecar(enriched, out)
    return EXIT_OK


def _cmd_index(args) -> int:
    cfg = _load_config(args)
    index_path = _opt(args, cfg, "index")
    if index_path is None:
        raise ValueError("index needs --index SNAPSHOT (flag or config)")
    if os.path.exists(index_path) and not args.force:
        index = retrieval.load_index(index_path)
    else:
        index = retrieval.Index()
    for path in args.sidecars:
        retrieval.index_record(index, load_sidecar(path))
    retrieval.save_index(index, index_path)
    _err(f"{index.doc_count} documents -> {index_path}")
    return EXIT_OK


def _cmd_search(args) -> int:
    cfg = _load_config(args)
    index_path = _opt(args, cfg, "index")
    if index_path is None:
        raise ValueError("search needs --index SNAPSHOT (flag or config)")
    index = retrieval.load_index(index_path)
    terms = args.query.split()
    glossary = onto = None
    if args.expand:
        gpath = _opt(args, cfg, "glossary")
        if gpath is None:
            raise ValueError("--expand needs --glossary (flag or config)")
        glossary = _load_glossary(gpath)
        opath = _opt(args, cfg, "ontology")
        if opath is not None:
            onto = _load_ontology(opath)
    query = retrieval.expand_query(terms, glossary, onto, hops=args.hops if args.expand else 0)
    hits = retrieval.search(index, query, k=args.k, kind=args.kind)
    for rank, hit in enumerate(hits, start=1):
        print(f"{rank}\t{hit.doc_id}\t{hit.score:.6f}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    preds = args.pred or []
    truths = args.truth or []
    if len(preds) != len(truths) or not preds:
        raise ValueError("eval needs matching --pred/--truth pairs")
    gpath = _opt(args, cfg, "glossary")
    opath = _opt(args, cfg, "ontology")
    glossary = _load_glossary(gpath) if gpath else lexicon.load_glossary(_EMPTY_GLOSSARY)
    onto = _load_ontology(opath) if opath else ontology.load_ontology(_EMPTY_ONTOLOGY)
    reports = []
    for pred_path, truth_path in zip(preds, truths):
        predicted = load_sidecar(pred_path)
        with open(truth_path, "rb") as fh:
            truth = evaluation.load_truth(fh.read())
        reports.append(evaluation.evaluate(
            predicted, truth, glossary, onto, iou_threshold=args.iou_threshold))
    overall = evaluation.aggregate(reports, macro=args.macro)
    print(evaluation.format_report_table(reports + [overall]))
    if args.out:
        obj = {
            "images": [evaluation.report_to_obj(r) for r in reports],
            "aggregate": evaluation.report_to_obj(overall),
        }
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, sort_keys=True, indent=2)
            fh.write("\n")
    return EXIT_OK


def _cmd_overlay(args) -> int:
    with open(args.infile, "rb") as fh:
        grid = decode_pgm(fh.read())
    record = load_sidecar(args.sidecar or sidecar_path(args.infile))
    out_grid = render_overlay(grid, record)
    with open(args.out, "wb") as fh:
        fh.write(encode_pgm(out_grid))
    return EXIT_OK


def _cmd_mock_serve(args) -> int:
    fixtures = None
    if args.fixtures:
        with open(args.fixtures, "rb") as fh:
            fixtures = load_fixture_table(fh.read())
    server = MockBackendServer(host=args.host, port=args.port,
                               fixtures=fixtures, max_tags=args.max_tags)
    for stage, url in server.endpoints.items():
        _err(f"{stage}: {url}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def _cmd_validate(args) -> int:
    with open(args.infile, "rb") as fh:
        data = fh.read()
    doc = json.loads(data.decode("utf-8"))
    record = record_from_obj(doc)
    image_bytes = None
    if args.image:
        with open(args.image, "rb") as fh:
            image_bytes = fh.read()
    violations = validate_record(record, image_bytes)
    if violations:
        for v in violations:
            print(v)
        return EXIT_DATA
    print("ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treatise",
                     description="Segment, label, index, and search treatise page images.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="path to a treatise.json config file")
        return p

    p = common(sub.add_parser("segment", help="watershed-segment one graymap image"))
    p.add_argument("--in", dest="infile", required=True, metavar="IMAGE")
    p.add_argument("--out", metavar="SIDECAR")
    p.add_argument("--relief", choices=("gradient", "raw"))
    p.add_argument("--h", type=int, help="minimum basin depth kept as a marker")
    p.set_defaults(func=_cmd_segment)

    p = common(sub.add_parser("pipeline", help="run the labeling pipeline"))
    p.add_argument("--in", dest="infile", metavar="IMAGE")
    p.add_argument("--out", metavar="SIDECAR")
    p.add_argument("--method", choices=sorted(_METHOD_NAMES))
    p.add_argument("--manifest", metavar="MANIFEST", help="process a whole corpus")
    p.add_argument("--glossary")
    p.add_argument("--ontology")
    p.add_argument("--vocabulary", help="vocabulary seed path (m4/m4b)")
    p.add_argument("--seg-stage", dest="seg_stage",
                   choices=("before_labeling", "after_labeling"))
    p.add_argument("--max-tags", dest="max_tags", type=int)
    p.add_argument("--force", action="store_true",
                   help="reprocess images that already have sidecars")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_pipeline)

    p = common(sub.add_parser("vocab", help="build the definition vocabulary seed"))
    p.add_argument("--glossary")
    p.add_argument("--out", required=True, metavar="SEED")
    p.add_argument("--language")
    p.set_defaults(func=_cmd_vocab)

    p = common(sub.add_parser("enrich", help="attach concepts and definitions to labels"))
    p.add_argument("--in", dest="infile", required=True, metavar="SIDECAR")
    p.add_argument("--out", metavar="SIDECAR")
    p.add_argument("--glossary")
    p.add_argument("--ontology")
    p.set_defaults(func=_cmd_enrich)

    p = common(sub.add_parser("index", help="add sidecar records to an index snapshot"))
    p.add_argument("--index", metavar="SNAPSHOT")
    p.add_argument("--force", action="store_true", help="rebuild instead of updating")
    p.add_argument("sidecars", nargs="+", metavar="SIDECAR")
    p.set_defaults(func=_cmd_index)

    p = common(sub.add_parser("search", help="ranked query over an index snapshot"))
    p.add_argument("--index", metavar="SNAPSHOT")
    p.add_argument("--query", required=True)
    p.add_argument("--expand", action="store_true")
    p.add_argument("--hops", type=int, choices=(0, 1), default=0)
    p.add_argument("--glossary")
    p.add_argument("--ontology")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--kind", choices=("all", "image", "segment"), default="all")
    p.set_defaults(func=_cmd_search)

    p = common(sub.add_parser("eval", help="score predictions against curated truth"))
    p.add_argument("--pred", action="append", metavar="SIDECAR")
    p.add_argument("--truth", action="append", metavar="SIDECAR")
    p.add_argument("--glossary")
    p.add_argument("--ontology")
    p.add_argument("--iou-threshold", dest="iou_threshold", type=float, default=0.5)
    p.add_argument("--macro", action="store_true")
    p.add_argument("--out", metavar="REPORT_JSON")
    p.set_defaults(func=_cmd_eval)

    p = common(sub.add_parser("overlay", help="render contours and boxes onto the image"))
    p.add_argument("--in", dest="infile", required=True, metavar="IMAGE")
    p.add_argument("--sidecar", metavar="SIDECAR")
    p.add_argument("--out", required=True, metavar="IMAGE")
    p.set_defaults(func=_cmd_overlay)

    p = common(sub.add_parser("mock-serve", help="serve deterministic mock backends"))
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--fixtures", metavar="TABLE_JSON")
    p.add_argument("--max-tags", dest="max_tags", type=int, default=32)
    p.set_defaults(func=_cmd_mock_serve)

    p = common(sub.add_parser("validate", help="check a sidecar against every invariant"))
    p.add_argument("--in", dest="infile", required=True, metavar="SIDECAR")
    p.add_argument("--image", metavar="IMAGE", help="re-hash these bytes against image_id")
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except BackendError as exc:
        _err(f"error: {exc}")
        return EXIT_BACKEND
    except (PgmError, RleError, SidecarFormatError, SidecarValidationError,
            GlossaryFormatError, OntologyFormatError, ManifestError,
            PipelineConfigError, json.JSONDecodeError, ValueError, KeyError,
            OSError) as exc:
        _err(f"error: {exc}")
        return EXIT_DATA
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
