import sys

from growcl.cli import main

sys.exit(main())
