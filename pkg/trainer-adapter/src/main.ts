#!/usr/bin/env node
import { serve } from "./adapter";

serve(process.stdin, process.stdout).then((code) => process.exit(code));
