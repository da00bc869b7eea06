import sys

from porogen.cli import main

sys.exit(main())
