/**
 * letw-convert <checkpoint.safetensors> <out.letw> [--map layermap.json]
 *
 * Exit codes follow the tracker CLI convention: 0 success, 2 input error
 * (unreadable or mismatched checkpoint), 3 usage error.
 */

import { resolve } from "node:path";
import { fileURLToPath } from "node:url";
import { convert, ConversionError } from "./convert.js";
import { DEFAULT_LAYER_MAP, loadLayerMap } from "./layermap.js";

export function main(argv: string[]): number {
  const args = [...argv];
  let mapPath: string | undefined;
  const positional: string[] = [];
  while (args.length > 0) {
    const a = args.shift()!;
    if (a === "--map") {
      mapPath = args.shift();
      if (!mapPath) {
        console.error("error: --map requires a path");
        return 3;
      }
    } else if (a === "--help" || a === "-h") {
      console.log("usage: letw-convert <checkpoint.safetensors> <out.letw> [--map layermap.json]");
      return 0;
    } else if (a.startsWith("-")) {
      console.error(`error: unknown flag ${a}`);
      return 3;
    } else {
      positional.push(a);
    }
  }
  if (positional.length !== 2) {
    console.error("usage: letw-convert <checkpoint.safetensors> <out.letw> [--map layermap.json]");
    return 3;
  }
  const [checkpoint, out] = positional;
  try {
    const layerMap = mapPath ? loadLayerMap(mapPath) : DEFAULT_LAYER_MAP;
    const summary = convert(checkpoint, out, layerMap);
    for (const layer of summary.layers) {
      console.log(
        `${layer.slot}: weights [${layer.weightShape.join("x")}] crc32 ${layer.weightChecksum}, ` +
          `bias [${layer.biasShape.join("x")}] crc32 ${layer.biasChecksum}`,
      );
    }
    console.log(`wrote ${summary.output}`);
    return 0;
  } catch (e) {
    if (e instanceof ConversionError) {
      console.error(`error: ${e.message}`);
      return 2;
    }
    console.error(`error: ${e instanceof Error ? e.message : e}`);
    return 2;
  }
}

if (process.argv[1] && fileURLToPath(import.meta.url) === resolve(process.argv[1])) {
  process.exit(main(process.argv.slice(2)));
}
