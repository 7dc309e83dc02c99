from threer.cli import main

raise SystemExit(main())
