/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    classes(): number;
    /**
     * RGBA signed map at region resolution; accounting via `last_info`.
     */
    diff(c1: number, c2: number): Uint8Array;
    /**
     * RGBA overlay; details via `last_info`.
     */
    explain(kind: string, rank: number, threshold: number): Uint8Array;
    last_info(): string;
    constructor();
    /**
     * JSON with the label and both heads' probabilities.
     */
    predictions(): string;
    region_size(): number;
    /**
     * Draws a new image; returns its RGBA pixels.
     */
    sample(_class: number, seed: bigint): Uint8Array;
    size(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_classes: (a: number) => number;
    readonly demo_diff: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_explain: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_last_info: (a: number) => [number, number];
    readonly demo_new: () => [number, number, number];
    readonly demo_predictions: (a: number) => [number, number];
    readonly demo_region_size: (a: number) => number;
    readonly demo_sample: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly demo_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
