/* tslint:disable */
/* eslint-disable */

/**
 * One clip of the moving-target task, as raw intensities.
 */
export class Clip {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly channels: number;
    readonly distractors: Uint32Array;
    readonly frames: number;
    /**
     * Row-major `frames x channels`.
     */
    readonly intensity: Float64Array;
    /**
     * Target channel per frame; the label is the last entry.
     */
    readonly trace: Uint32Array;
}

/**
 * Forward GFLOPs of `module` for clip lengths `1..=t_max`.
 */
export function flops_curve(module: string, c: number, d: number, t_max: number): Float64Array;

/**
 * Impulse response `h_k = Ā^k B̄` of a scalar SSM with `A = -exp(a_log)`
 * discretized at step `delta`, for `k = 0..len`.
 */
export function impulse_response(a_log: number, delta: number, len: number): Float64Array;

/**
 * Names accepted by [`flops_curve`].
 */
export function module_names(): string[];

/**
 * Parameter count of `module` at the given sizes.
 */
export function module_params(module: string, t: number, c: number, d: number): number;

/**
 * Draws a clip with the default task sizes. `moving = false` gives the
 * static control, where the target is simply the brightest channel.
 */
export function synthetic_clip(seed: bigint, moving: boolean, noise: number): Clip;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_clip_free: (a: number, b: number) => void;
    readonly clip_channels: (a: number) => number;
    readonly clip_distractors: (a: number) => [number, number];
    readonly clip_frames: (a: number) => number;
    readonly clip_intensity: (a: number) => [number, number];
    readonly clip_trace: (a: number) => [number, number];
    readonly flops_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly impulse_response: (a: number, b: number, c: number) => [number, number, number, number];
    readonly module_names: () => [number, number];
    readonly module_params: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly synthetic_clip: (a: bigint, b: number, c: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
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
