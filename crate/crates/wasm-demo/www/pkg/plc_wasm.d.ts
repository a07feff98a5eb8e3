/* tslint:disable */
/* eslint-disable */

/**
 * Table and coding cost of integer symbols under a zero-mean Gaussian of scale `sigma`.
 */
export class RateReport {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    probabilities(): Float64Array;
    readonly codedBytes: number;
    readonly escapeProbability: number;
    /**
     * Sum of table codelengths, escapes included.
     */
    readonly idealBits: number;
    /**
     * Symbol value of `probabilities()[0]`.
     */
    readonly offset: number;
    readonly roundTrip: boolean;
}

/**
 * BD-rate of two `bpp,quality` CSV texts.
 */
export function bdRate(reference: string, candidate: string, lower_is_better: boolean): string;

/**
 * Range-codes `values` with the Gaussian table for `sigma`.
 */
export function gaussianRate(sigma: number, values: Int32Array): RateReport;

/**
 * `n` stochastically rounded values of `v` at `temperature`.
 */
export function sga_samples(v: number, temperature: number, n: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_ratereport_free: (a: number, b: number) => void;
    readonly bdRate: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly gaussianRate: (a: number, b: number, c: number) => [number, number, number];
    readonly ratereport_codedBytes: (a: number) => number;
    readonly ratereport_escapeProbability: (a: number) => number;
    readonly ratereport_idealBits: (a: number) => number;
    readonly ratereport_offset: (a: number) => number;
    readonly ratereport_probabilities: (a: number) => [number, number];
    readonly ratereport_roundTrip: (a: number) => number;
    readonly sga_samples: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
