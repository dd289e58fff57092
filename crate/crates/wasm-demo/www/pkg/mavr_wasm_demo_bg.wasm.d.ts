/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const scene_computeFlow: (a: number) => [number, number];
export const scene_computeMask: (a: number, b: number) => [number, number, number];
export const scene_flowFrame: (a: number, b: number) => [number, number];
export const scene_frames: (a: number) => number;
export const scene_maskFrame: (a: number, b: number) => [number, number];
export const scene_meanFlow: (a: number, b: number) => [number, number];
export const scene_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const scene_rgbFrame: (a: number, b: number) => [number, number];
export const scene_size: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
