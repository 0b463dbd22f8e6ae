/* tslint:disable */
/* eslint-disable */

/**
 * A few generated dialogues with their gold responses.
 */
export function preview_data(noise: number, ambiguity: number, seed: bigint, count: number): string;

/**
 * Contrastive loss of a synthetic batch across a log-spaced temperature grid.
 */
export function temperature_sweep(batch: number, misalignment: number, seed: bigint): string;

/**
 * Train one regime on a small synthetic corpus and report dev curves plus
 * test recall.
 */
export function train_regime(regime: string, ambiguity: number, noise: number, steps: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly preview_data: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
    readonly temperature_sweep: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly train_regime: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
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
