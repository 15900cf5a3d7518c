/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_clip_free: (a: number, b: number) => void;
export const clip_channels: (a: number) => number;
export const clip_distractors: (a: number) => [number, number];
export const clip_frames: (a: number) => number;
export const clip_intensity: (a: number) => [number, number];
export const clip_trace: (a: number) => [number, number];
export const flops_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const impulse_response: (a: number, b: number, c: number) => [number, number, number, number];
export const module_names: () => [number, number];
export const module_params: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const synthetic_clip: (a: bigint, b: number, c: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_start: () => void;
