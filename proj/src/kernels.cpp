#include "sed/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>

namespace sed::kernels {

namespace {
std::atomic<Exec> g_default{
#ifdef _OPENMP
    Exec::parallel
#else
    Exec::serial
#endif
};

using i64 = std::int64_t;
}  // namespace

Exec default_exec() { return g_default.load(); }
void set_default_exec(Exec e) { g_default.store(e); }

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace {

// One output plane y[b,co] = sum_ci conv(x[b,ci], w[co,ci]). Accumulation
// order is (ci, dt, df) ascending; the serial reference uses the same order.
void conv_plane(const double* xb, std::size_t Ci, std::size_t T, std::size_t F,
                const double* wc, std::size_t k, double* y) {
  const i64 pad = static_cast<i64>(k) / 2;
  const i64 Ti = static_cast<i64>(T), Fi = static_cast<i64>(F);
  std::memset(y, 0, sizeof(double) * T * F);
  for (std::size_t ci = 0; ci < Ci; ++ci) {
    const double* xp = xb + ci * T * F;
    const double* wp = wc + ci * k * k;
    for (i64 dt = 0; dt < static_cast<i64>(k); ++dt) {
      const i64 t0 = std::max<i64>(0, pad - dt);
      const i64 t1 = std::min<i64>(Ti, Ti + pad - dt);
      for (i64 df = 0; df < static_cast<i64>(k); ++df) {
        const double wv = wp[dt * k + df];
        if (wv == 0.0) continue;
        const i64 f0 = std::max<i64>(0, pad - df);
        const i64 f1 = std::min<i64>(Fi, Fi + pad - df);
        for (i64 t = t0; t < t1; ++t) {
          const double* xrow = xp + (t + dt - pad) * Fi + (df - pad);
          double* yrow = y + t * Fi;
          for (i64 f = f0; f < f1; ++f) yrow[f] += wv * xrow[f];
        }
      }
    }
  }
}

}  // namespace

void conv2d_forward(const double* x, std::size_t B, std::size_t Ci,
                    std::size_t T, std::size_t F, const double* w,
                    std::size_t Co, std::size_t k, double* y, Exec exec) {
  const i64 pad = static_cast<i64>(k) / 2;
  if (exec == Exec::serial) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t co = 0; co < Co; ++co)
        for (i64 t = 0; t < static_cast<i64>(T); ++t)
          for (i64 f = 0; f < static_cast<i64>(F); ++f) {
            double acc = 0.0;
            for (std::size_t ci = 0; ci < Ci; ++ci)
              for (i64 dt = 0; dt < static_cast<i64>(k); ++dt)
                for (i64 df = 0; df < static_cast<i64>(k); ++df) {
                  const i64 tt = t + dt - pad;
                  const i64 ff = f + df - pad;
                  if (tt < 0 || tt >= static_cast<i64>(T) || ff < 0 ||
                      ff >= static_cast<i64>(F))
                    continue;
                  const double wv = w[((co * Ci + ci) * k + dt) * k + df];
                  if (wv == 0.0) continue;
                  acc += wv * x[((b * Ci + ci) * T + tt) * F + ff];
                }
            y[((b * Co + co) * T + t) * F + f] = acc;
          }
    return;
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 b = 0; b < static_cast<i64>(B); ++b)
    for (i64 co = 0; co < static_cast<i64>(Co); ++co)
      conv_plane(x + b * Ci * T * F, Ci, T, F, w + co * Ci * k * k, k,
                 y + (b * Co + co) * T * F);
}

namespace {

// dx[b,ci] = sum_co corr(dy[b,co], w[co,ci]); order (co, dt, df) ascending.
void conv_plane_bwd_input(const double* dyb, std::size_t Co, std::size_t T,
                          std::size_t F, const double* w, std::size_t Ci,
                          std::size_t ci, std::size_t k, double* dx) {
  const i64 pad = static_cast<i64>(k) / 2;
  const i64 Ti = static_cast<i64>(T), Fi = static_cast<i64>(F);
  std::memset(dx, 0, sizeof(double) * T * F);
  for (std::size_t co = 0; co < Co; ++co) {
    const double* dyp = dyb + co * T * F;
    const double* wp = w + (co * Ci + ci) * k * k;
    for (i64 dt = 0; dt < static_cast<i64>(k); ++dt) {
      // dx[s] += dy[s + pad - dt] * w[dt]
      const i64 s0 = std::max<i64>(0, dt - pad);
      const i64 s1 = std::min<i64>(Ti, Ti + dt - pad);
      for (i64 df = 0; df < static_cast<i64>(k); ++df) {
        const double wv = wp[dt * k + df];
        if (wv == 0.0) continue;
        const i64 g0 = std::max<i64>(0, df - pad);
        const i64 g1 = std::min<i64>(Fi, Fi + df - pad);
        for (i64 s = s0; s < s1; ++s) {
          const double* dyrow = dyp + (s + pad - dt) * Fi + (pad - df);
          double* dxrow = dx + s * Fi;
          for (i64 g = g0; g < g1; ++g) dxrow[g] += wv * dyrow[g];
        }
      }
    }
  }
}

}  // namespace

void conv2d_backward_input(const double* dy, std::size_t B, std::size_t Ci,
                           std::size_t T, std::size_t F, const double* w,
                           std::size_t Co, std::size_t k, double* dx,
                           Exec exec) {
  const i64 pad = static_cast<i64>(k) / 2;
  if (exec == Exec::serial) {
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ci = 0; ci < Ci; ++ci)
        for (i64 s = 0; s < static_cast<i64>(T); ++s)
          for (i64 g = 0; g < static_cast<i64>(F); ++g) {
            double acc = 0.0;
            for (std::size_t co = 0; co < Co; ++co)
              for (i64 dt = 0; dt < static_cast<i64>(k); ++dt)
                for (i64 df = 0; df < static_cast<i64>(k); ++df) {
                  const i64 t = s + pad - dt;
                  const i64 f = g + pad - df;
                  if (t < 0 || t >= static_cast<i64>(T) || f < 0 ||
                      f >= static_cast<i64>(F))
                    continue;
                  const double wv = w[((co * Ci + ci) * k + dt) * k + df];
                  if (wv == 0.0) continue;
                  acc += wv * dy[((b * Co + co) * T + t) * F + f];
                }
            dx[((b * Ci + ci) * T + s) * F + g] = acc;
          }
    return;
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 b = 0; b < static_cast<i64>(B); ++b)
    for (i64 ci = 0; ci < static_cast<i64>(Ci); ++ci)
      conv_plane_bwd_input(dy + b * Co * T * F, Co, T, F, w, Ci, ci, k,
                           dx + (b * Ci + ci) * T * F);
}

void conv2d_backward_weight(const double* x, const double* dy, std::size_t B,
                            std::size_t Ci, std::size_t T, std::size_t F,
                            std::size_t Co, std::size_t k, double* dw,
                            Exec exec) {
  const i64 pad = static_cast<i64>(k) / 2;
  const i64 Ti = static_cast<i64>(T), Fi = static_cast<i64>(F);
  auto pair_grad = [&](std::size_t co, std::size_t ci) {
    double* dwp = dw + (co * Ci + ci) * k * k;
    for (i64 dt = 0; dt < static_cast<i64>(k); ++dt)
      for (i64 df = 0; df < static_cast<i64>(k); ++df) {
        const i64 t0 = std::max<i64>(0, pad - dt);
        const i64 t1 = std::min<i64>(Ti, Ti + pad - dt);
        const i64 f0 = std::max<i64>(0, pad - df);
        const i64 f1 = std::min<i64>(Fi, Fi + pad - df);
        double acc = 0.0;
        for (std::size_t b = 0; b < B; ++b) {
          const double* xp = x + (b * Ci + ci) * T * F;
          const double* dyp = dy + (b * Co + co) * T * F;
          for (i64 t = t0; t < t1; ++t) {
            const double* xrow = xp + (t + dt - pad) * Fi + (df - pad);
            const double* dyrow = dyp + t * Fi;
            for (i64 f = f0; f < f1; ++f) acc += dyrow[f] * xrow[f];
          }
        }
        dwp[dt * k + df] = acc;
      }
  };
  if (exec == Exec::serial) {
    for (std::size_t co = 0; co < Co; ++co)
      for (std::size_t ci = 0; ci < Ci; ++ci) pair_grad(co, ci);
    return;
  }
#pragma omp parallel for collapse(2) schedule(static)
  for (i64 co = 0; co < static_cast<i64>(Co); ++co)
    for (i64 ci = 0; ci < static_cast<i64>(Ci); ++ci)
      pair_grad(static_cast<std::size_t>(co), static_cast<std::size_t>(ci));
}

// ---------------------------------------------------------------------------
// maxpool
// ---------------------------------------------------------------------------

namespace {

void pool_plane(const double* x, std::size_t T, std::size_t F, std::size_t pt,
                std::size_t pf, double* y, std::uint32_t* argmax) {
  const std::size_t To = T / pt, Fo = F / pf;
  for (std::size_t ot = 0; ot < To; ++ot)
    for (std::size_t of = 0; of < Fo; ++of) {
      double best = x[(ot * pt) * F + of * pf];
      std::uint32_t bestIdx = static_cast<std::uint32_t>((ot * pt) * F + of * pf);
      for (std::size_t it = 0; it < pt; ++it)
        for (std::size_t jf = 0; jf < pf; ++jf) {
          const std::size_t idx = (ot * pt + it) * F + of * pf + jf;
          if (x[idx] > best) {
            best = x[idx];
            bestIdx = static_cast<std::uint32_t>(idx);
          }
        }
      y[ot * Fo + of] = best;
      argmax[ot * Fo + of] = bestIdx;
    }
}

}  // namespace

void maxpool_forward(const double* x, std::size_t B, std::size_t C,
                     std::size_t T, std::size_t F, std::size_t pt,
                     std::size_t pf, double* y, std::uint32_t* argmax,
                     Exec exec) {
  const std::size_t To = T / pt, Fo = F / pf;
  if (exec == Exec::serial) {
    for (std::size_t p = 0; p < B * C; ++p)
      pool_plane(x + p * T * F, T, F, pt, pf, y + p * To * Fo,
                 argmax + p * To * Fo);
    return;
  }
#pragma omp parallel for schedule(static)
  for (i64 p = 0; p < static_cast<i64>(B * C); ++p)
    pool_plane(x + p * T * F, T, F, pt, pf, y + p * To * Fo,
               argmax + p * To * Fo);
}

void maxpool_backward(const double* dy, const std::uint32_t* argmax,
                      std::size_t B, std::size_t C, std::size_t T,
                      std::size_t F, std::size_t pt, std::size_t pf,
                      double* dx, Exec exec) {
  const std::size_t To = T / pt, Fo = F / pf;
  auto plane = [&](std::size_t p) {
    double* dxp = dx + p * T * F;
    std::memset(dxp, 0, sizeof(double) * T * F);
    const double* dyp = dy + p * To * Fo;
    const std::uint32_t* am = argmax + p * To * Fo;
    for (std::size_t i = 0; i < To * Fo; ++i) dxp[am[i]] += dyp[i];
  };
  if (exec == Exec::serial) {
    for (std::size_t p = 0; p < B * C; ++p) plane(p);
    return;
  }
#pragma omp parallel for schedule(static)
  for (i64 p = 0; p < static_cast<i64>(B * C); ++p)
    plane(static_cast<std::size_t>(p));
}

// ---------------------------------------------------------------------------
// frame linear
// ---------------------------------------------------------------------------

void frame_linear_forward(const double* h, std::size_t B, std::size_t T,
                          std::size_t D, const double* w, const double* bias,
                          std::size_t C, double* logits, Exec exec) {
  auto row = [&](std::size_t bt) {
    const double* hp = h + bt * D;
    double* lp = logits + bt * C;
    for (std::size_t c = 0; c < C; ++c) {
      const double* wp = w + c * D;
      double acc = bias ? bias[c] : 0.0;
      for (std::size_t d = 0; d < D; ++d) acc += wp[d] * hp[d];
      lp[c] = acc;
    }
  };
  if (exec == Exec::serial) {
    for (std::size_t bt = 0; bt < B * T; ++bt) row(bt);
    return;
  }
#pragma omp parallel for schedule(static)
  for (i64 bt = 0; bt < static_cast<i64>(B * T); ++bt)
    row(static_cast<std::size_t>(bt));
}

void frame_linear_backward(const double* h, const double* dlogits,
                           std::size_t B, std::size_t T, std::size_t D,
                           std::size_t C, const double* w, double* dh,
                           double* dw, double* db, Exec exec) {
  const std::size_t N = B * T;
  auto dh_row = [&](std::size_t bt) {
    const double* dlp = dlogits + bt * C;
    double* dhp = dh + bt * D;
    std::memset(dhp, 0, sizeof(double) * D);
    for (std::size_t c = 0; c < C; ++c) {
      const double g = dlp[c];
      if (g == 0.0) continue;
      const double* wp = w + c * D;
      for (std::size_t d = 0; d < D; ++d) dhp[d] += g * wp[d];
    }
  };
  // dw[c,d] = sum_bt dlogits[bt,c] * h[bt,d], accumulated in bt order.
  auto dw_row = [&](std::size_t c) {
    double* dwp = dw + c * D;
    std::memset(dwp, 0, sizeof(double) * D);
    double acc_b = 0.0;
    for (std::size_t bt = 0; bt < N; ++bt) {
      const double g = dlogits[bt * C + c];
      acc_b += g;
      if (g == 0.0) continue;
      const double* hp = h + bt * D;
      for (std::size_t d = 0; d < D; ++d) dwp[d] += g * hp[d];
    }
    if (db) db[c] = acc_b;
  };
  if (exec == Exec::serial) {
    for (std::size_t bt = 0; bt < N; ++bt) dh_row(bt);
    for (std::size_t c = 0; c < C; ++c) dw_row(c);
    return;
  }
#pragma omp parallel for schedule(static)
  for (i64 bt = 0; bt < static_cast<i64>(N); ++bt)
    dh_row(static_cast<std::size_t>(bt));
#pragma omp parallel for schedule(static)
  for (i64 c = 0; c < static_cast<i64>(C); ++c)
    dw_row(static_cast<std::size_t>(c));
}

}  // namespace sed::kernels
