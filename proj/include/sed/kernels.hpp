#pragma once

#include <cstddef>
#include <cstdint>

// Hot inner loops of the CNN stack. Every kernel exists twice: a naive
// serial reference and an OpenMP version that partitions disjoint output
// slices across threads. Both accumulate in the same order per output
// element, so results are bitwise identical; tests rely on that and the
// bench_kernels tool compares their throughput.
//
// All kernels use overwrite semantics: output buffers are fully written,
// never accumulated into.

namespace sed::kernels {

enum class Exec { serial, parallel };

// Process-wide default (parallel when compiled with OpenMP).
Exec default_exec();
void set_default_exec(Exec e);

// 2-D convolution over (B, C, T, F) tensors, odd square kernel, zero
// padding k/2 on both axes (shape preserving), no bias.
void conv2d_forward(const double* x, std::size_t B, std::size_t Ci,
                    std::size_t T, std::size_t F, const double* w,
                    std::size_t Co, std::size_t k, double* y, Exec exec);

void conv2d_backward_input(const double* dy, std::size_t B, std::size_t Ci,
                           std::size_t T, std::size_t F, const double* w,
                           std::size_t Co, std::size_t k, double* dx,
                           Exec exec);

void conv2d_backward_weight(const double* x, const double* dy, std::size_t B,
                            std::size_t Ci, std::size_t T, std::size_t F,
                            std::size_t Co, std::size_t k, double* dw,
                            Exec exec);

// Max pooling with window (pt, pf) and matching stride. Output dims are
// floor(T/pt) x floor(F/pf); trailing rows/cols that do not fill a window
// are dropped. argmax stores the flat within-plane input index of each
// window maximum (first maximum on ties).
void maxpool_forward(const double* x, std::size_t B, std::size_t C,
                     std::size_t T, std::size_t F, std::size_t pt,
                     std::size_t pf, double* y, std::uint32_t* argmax,
                     Exec exec);

// dx must cover the full input plane; cells outside any window get zero.
void maxpool_backward(const double* dy, const std::uint32_t* argmax,
                      std::size_t B, std::size_t C, std::size_t T,
                      std::size_t F, std::size_t pt, std::size_t pf,
                      double* dx, Exec exec);

// Per-frame affine map: logits[b,t,c] = bias[c] + sum_d h[b,t,d] * w[c,d].
// bias may be null.
void frame_linear_forward(const double* h, std::size_t B, std::size_t T,
                          std::size_t D, const double* w, const double* bias,
                          std::size_t C, double* logits, Exec exec);

// dh, dw, db are fully overwritten; db may be null.
void frame_linear_backward(const double* h, const double* dlogits,
                           std::size_t B, std::size_t T, std::size_t D,
                           std::size_t C, const double* w, double* dh,
                           double* dw, double* db, Exec exec);

}  // namespace sed::kernels
