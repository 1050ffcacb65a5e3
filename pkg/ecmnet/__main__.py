from ecmnet.cli import main

raise SystemExit(main())
