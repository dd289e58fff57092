/* tslint:disable */
/* eslint-disable */

/**
 * A rendered clip plus whichever views have been extracted so far.
 */
export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    computeFlow(): void;
    computeMask(threshold: number): number;
    /**
     * RGBA colour-wheel rendering of the flow into frame `t`; empty before
     * `computeFlow`.
     */
    flowFrame(t: number): Uint8Array;
    frames(): number;
    /**
     * RGBA overlay: white where the mask and silhouette agree, red for
     * false positives, blue for misses. Empty before `computeMask`.
     */
    maskFrame(t: number): Uint8Array;
    /**
     * Mean (u, v) over the frame, in pixels per frame.
     */
    meanFlow(t: number): Float32Array;
    /**
     * Renders a clip; `class` indexes vShape, inv_vShape, left_right,
     * up_down and `scale` indexes short, medium, long.
     */
    constructor(_class: number, scale: number, seed: number, noisy: boolean);
    /**
     * RGBA bytes of frame `t`.
     */
    rgbFrame(t: number): Uint8Array;
    size(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_computeFlow: (a: number) => [number, number];
    readonly scene_computeMask: (a: number, b: number) => [number, number, number];
    readonly scene_flowFrame: (a: number, b: number) => [number, number];
    readonly scene_frames: (a: number) => number;
    readonly scene_maskFrame: (a: number, b: number) => [number, number];
    readonly scene_meanFlow: (a: number, b: number) => [number, number];
    readonly scene_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly scene_rgbFrame: (a: number, b: number) => [number, number];
    readonly scene_size: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
