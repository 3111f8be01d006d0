/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const cascade: (a: number, b: number, c: number) => [number, number];
export const finite_key_curve: (a: number, b: number, c: number) => [number, number];
export const synchronize: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
