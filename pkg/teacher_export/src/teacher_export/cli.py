import argparse
import json
import sys
from pathlib import Path

from .encoders import EncoderUnavailable, MissingAsset
from .exporter import ExportJob, export_embeddings
from .formats import FormatError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="teacher-export")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="export frozen encoder features as RCEMB1")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", choices=("image", "text"), required=True)
    p.add_argument("--encoder", default="rp-64",
                   help="rp-<dim> for the offline projection encoder, or a hub model name")
    p.add_argument("--out", required=True)
    p.add_argument("--prompt-mode", choices=("grid", "plain"), default="grid",
                   help="text exports: full prefix/suffix grid or bare class names")
    p.add_argument("--batch-size", type=int, default=16)
    args = parser.parse_args(argv)

    job = ExportJob(Path(args.manifest), args.modality, args.encoder,
                    Path(args.out), args.prompt_mode, args.batch_size)
    try:
        result = export_embeddings(job)
    except (EncoderUnavailable, MissingAsset, FormatError, OSError,
            json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
