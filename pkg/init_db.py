#!/usr/bin/env python3
"""Create the SQLite request log used by the feed service."""
import os
import sys
from typing import List, Optional

import config
from database import init_database


def main(argv: Optional[List[str]] = None) -> int:
    """Initialize the request log at the given path (default: FEEDQL_REQUEST_LOG)."""
    argv = sys.argv[1:] if argv is None else argv
    db_path = argv[0] if argv else config.REQUEST_LOG
    if not db_path:
        print("❌ No request log path: pass one or set FEEDQL_REQUEST_LOG", file=sys.stderr)
        return 1

    try:
        init_database(db_path)
        os.chmod(db_path, 0o644)
    except Exception as e:
        print(f"❌ Error initializing request log: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
