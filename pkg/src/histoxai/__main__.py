from histoxai.cli import main

raise SystemExit(main())
