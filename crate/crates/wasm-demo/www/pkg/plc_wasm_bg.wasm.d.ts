/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_ratereport_free: (a: number, b: number) => void;
export const bdRate: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const gaussianRate: (a: number, b: number, c: number) => [number, number, number];
export const ratereport_codedBytes: (a: number) => number;
export const ratereport_escapeProbability: (a: number) => number;
export const ratereport_idealBits: (a: number) => number;
export const ratereport_offset: (a: number) => number;
export const ratereport_probabilities: (a: number) => [number, number];
export const ratereport_roundTrip: (a: number) => number;
export const sga_samples: (a: number, b: number, c: number, d: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
