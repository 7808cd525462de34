import sys

from cptr.cli import main

sys.exit(main())
