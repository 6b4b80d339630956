#include "meshtrack/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <vector>

#include "meshtrack/error.hpp"
#include "meshtrack/threading.hpp"

// Every kernel is written gather-style: one writer per output element, with a
// fixed inner summation order. The OpenMP versions therefore match the serial
// reference bitwise for any thread count.

namespace meshtrack::kernels {

Conv2dDims Conv2dDims::make(int cin, int h, int w, int cout, int kh, int kw,
                            int stride, int pad) {
  if (stride < 1 || pad < 0) fail_validation("conv2d stride must be >=1 and pad >=0");
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    fail_validation("conv2d kernel ", kh, "x", kw, " exceeds padded input ", h + 2 * pad,
                    "x", w + 2 * pad);
  Conv2dDims d{};
  d.cin = cin;
  d.h = h;
  d.w = w;
  d.cout = cout;
  d.kh = kh;
  d.kw = kw;
  d.stride = stride;
  d.pad = pad;
  d.oh = (h + 2 * pad - kh) / stride + 1;
  d.ow = (w + 2 * pad - kw) / stride + 1;
  return d;
}

Conv3dDims Conv3dDims::make(int cin, int dd, int h, int w, int cout, int kd, int kh,
                            int kw, std::array<int, 3> stride, std::array<int, 3> pad) {
  for (int s : stride)
    if (s < 1) fail_validation("conv3d stride must be >= 1");
  for (int p : pad)
    if (p < 0) fail_validation("conv3d pad must be >= 0");
  if (kd > dd + 2 * pad[0] || kh > h + 2 * pad[1] || kw > w + 2 * pad[2])
    fail_validation("conv3d kernel exceeds padded input extent");
  Conv3dDims d{};
  d.cin = cin;
  d.d = dd;
  d.h = h;
  d.w = w;
  d.cout = cout;
  d.kd = kd;
  d.kh = kh;
  d.kw = kw;
  d.stride = stride;
  d.pad = pad;
  d.od = (dd + 2 * pad[0] - kd) / stride[0] + 1;
  d.oh = (h + 2 * pad[1] - kh) / stride[1] + 1;
  d.ow = (w + 2 * pad[2] - kw) / stride[2] + 1;
  return d;
}

Conv3dDims Conv3dDims::make_transposed(int cin_t, int dd, int h, int w, int cout_t,
                                       int kd, int kh, int kw, std::array<int, 3> stride,
                                       std::array<int, 3> pad) {
  const int od = (dd - 1) * stride[0] - 2 * pad[0] + kd;
  const int oh = (h - 1) * stride[1] - 2 * pad[1] + kh;
  const int ow = (w - 1) * stride[2] - 2 * pad[2] + kw;
  if (od < 1 || oh < 1 || ow < 1)
    fail_validation("conv_transpose3d configuration yields non-positive output extent ",
                    od, "x", oh, "x", ow);
  // The transpose of conv(out_extent -> in_extent): build the forward dims
  // and check they round-trip (they do whenever the caller's extents are
  // reachable by that conv).
  Conv3dDims d = make(cout_t, od, oh, ow, cin_t, kd, kh, kw, stride, pad);
  if (d.od != dd || d.oh != h || d.ow != w)
    fail_validation("conv_transpose3d extents are not reachable by the adjoint conv");
  return d;
}

namespace {

// ---- shared per-element computations ----

inline double conv2d_out_at(const Conv2dDims& dm, const double* x, const double* w,
                            const double* bias, int co, int oy, int ox) {
  double acc = bias ? bias[co] : 0.0;
  for (int ci = 0; ci < dm.cin; ++ci) {
    const double* xc = x + (static_cast<std::size_t>(ci) * dm.h) * dm.w;
    const double* wc =
        w + ((static_cast<std::size_t>(co) * dm.cin + ci) * dm.kh) * dm.kw;
    for (int ky = 0; ky < dm.kh; ++ky) {
      const int iy = oy * dm.stride - dm.pad + ky;
      if (iy < 0 || iy >= dm.h) continue;
      for (int kx = 0; kx < dm.kw; ++kx) {
        const int ix = ox * dm.stride - dm.pad + kx;
        if (ix < 0 || ix >= dm.w) continue;
        acc += xc[static_cast<std::size_t>(iy) * dm.w + ix] *
               wc[static_cast<std::size_t>(ky) * dm.kw + kx];
      }
    }
  }
  return acc;
}

inline double conv2d_gx_at(const Conv2dDims& dm, const double* gy, const double* w,
                           int ci, int iy, int ix) {
  double acc = 0.0;
  for (int co = 0; co < dm.cout; ++co) {
    const double* gc = gy + (static_cast<std::size_t>(co) * dm.oh) * dm.ow;
    const double* wc =
        w + ((static_cast<std::size_t>(co) * dm.cin + ci) * dm.kh) * dm.kw;
    for (int ky = 0; ky < dm.kh; ++ky) {
      const int num_y = iy + dm.pad - ky;
      if (num_y < 0 || num_y % dm.stride) continue;
      const int oy = num_y / dm.stride;
      if (oy >= dm.oh) continue;
      for (int kx = 0; kx < dm.kw; ++kx) {
        const int num_x = ix + dm.pad - kx;
        if (num_x < 0 || num_x % dm.stride) continue;
        const int ox = num_x / dm.stride;
        if (ox >= dm.ow) continue;
        acc += gc[static_cast<std::size_t>(oy) * dm.ow + ox] *
               wc[static_cast<std::size_t>(ky) * dm.kw + kx];
      }
    }
  }
  return acc;
}

inline double conv2d_gw_at(const Conv2dDims& dm, const double* gy, const double* x,
                           int co, int ci, int ky, int kx) {
  double acc = 0.0;
  const double* gc = gy + (static_cast<std::size_t>(co) * dm.oh) * dm.ow;
  const double* xc = x + (static_cast<std::size_t>(ci) * dm.h) * dm.w;
  for (int oy = 0; oy < dm.oh; ++oy) {
    const int iy = oy * dm.stride - dm.pad + ky;
    if (iy < 0 || iy >= dm.h) continue;
    for (int ox = 0; ox < dm.ow; ++ox) {
      const int ix = ox * dm.stride - dm.pad + kx;
      if (ix < 0 || ix >= dm.w) continue;
      acc += gc[static_cast<std::size_t>(oy) * dm.ow + ox] *
             xc[static_cast<std::size_t>(iy) * dm.w + ix];
    }
  }
  return acc;
}

inline double conv3d_out_at(const Conv3dDims& dm, const double* x, const double* w,
                            const double* bias, int co, int oz, int oy, int ox) {
  double acc = bias ? bias[co] : 0.0;
  for (int ci = 0; ci < dm.cin; ++ci) {
    const double* xc = x + static_cast<std::size_t>(ci) * dm.d * dm.h * dm.w;
    const double* wc = w + ((static_cast<std::size_t>(co) * dm.cin + ci) * dm.kd) *
                               dm.kh * dm.kw;
    for (int kz = 0; kz < dm.kd; ++kz) {
      const int iz = oz * dm.stride[0] - dm.pad[0] + kz;
      if (iz < 0 || iz >= dm.d) continue;
      for (int ky = 0; ky < dm.kh; ++ky) {
        const int iy = oy * dm.stride[1] - dm.pad[1] + ky;
        if (iy < 0 || iy >= dm.h) continue;
        for (int kx = 0; kx < dm.kw; ++kx) {
          const int ix = ox * dm.stride[2] - dm.pad[2] + kx;
          if (ix < 0 || ix >= dm.w) continue;
          acc += xc[(static_cast<std::size_t>(iz) * dm.h + iy) * dm.w + ix] *
                 wc[(static_cast<std::size_t>(kz) * dm.kh + ky) * dm.kw + kx];
        }
      }
    }
  }
  return acc;
}

inline double conv3d_gx_at(const Conv3dDims& dm, const double* gy, const double* w,
                           int ci, int iz, int iy, int ix) {
  double acc = 0.0;
  for (int co = 0; co < dm.cout; ++co) {
    const double* gc = gy + static_cast<std::size_t>(co) * dm.od * dm.oh * dm.ow;
    const double* wc = w + ((static_cast<std::size_t>(co) * dm.cin + ci) * dm.kd) *
                               dm.kh * dm.kw;
    for (int kz = 0; kz < dm.kd; ++kz) {
      const int nz = iz + dm.pad[0] - kz;
      if (nz < 0 || nz % dm.stride[0]) continue;
      const int oz = nz / dm.stride[0];
      if (oz >= dm.od) continue;
      for (int ky = 0; ky < dm.kh; ++ky) {
        const int ny = iy + dm.pad[1] - ky;
        if (ny < 0 || ny % dm.stride[1]) continue;
        const int oy = ny / dm.stride[1];
        if (oy >= dm.oh) continue;
        for (int kx = 0; kx < dm.kw; ++kx) {
          const int nx = ix + dm.pad[2] - kx;
          if (nx < 0 || nx % dm.stride[2]) continue;
          const int ox = nx / dm.stride[2];
          if (ox >= dm.ow) continue;
          acc += gc[(static_cast<std::size_t>(oz) * dm.oh + oy) * dm.ow + ox] *
                 wc[(static_cast<std::size_t>(kz) * dm.kh + ky) * dm.kw + kx];
        }
      }
    }
  }
  return acc;
}

inline double conv3d_gw_at(const Conv3dDims& dm, const double* gy, const double* x,
                           int co, int ci, int kz, int ky, int kx) {
  double acc = 0.0;
  const double* gc = gy + static_cast<std::size_t>(co) * dm.od * dm.oh * dm.ow;
  const double* xc = x + static_cast<std::size_t>(ci) * dm.d * dm.h * dm.w;
  for (int oz = 0; oz < dm.od; ++oz) {
    const int iz = oz * dm.stride[0] - dm.pad[0] + kz;
    if (iz < 0 || iz >= dm.d) continue;
    for (int oy = 0; oy < dm.oh; ++oy) {
      const int iy = oy * dm.stride[1] - dm.pad[1] + ky;
      if (iy < 0 || iy >= dm.h) continue;
      for (int ox = 0; ox < dm.ow; ++ox) {
        const int ix = ox * dm.stride[2] - dm.pad[2] + kx;
        if (ix < 0 || ix >= dm.w) continue;
        acc += gc[(static_cast<std::size_t>(oz) * dm.oh + oy) * dm.ow + ox] *
               xc[(static_cast<std::size_t>(iz) * dm.h + iy) * dm.w + ix];
      }
    }
  }
  return acc;
}

struct WarpSample {
  double value;
  // d(value)/d(disp component), same trilinear stencil differentiated.
  double dvx, dvy, dvz;
};

inline WarpSample warp_sample_at(int d, int h, int w, const double* img,
                                 const double* disp, int z, int y, int x) {
  const std::size_t n = static_cast<std::size_t>(d) * h * w;
  const std::size_t q = (static_cast<std::size_t>(z) * h + y) * w + x;
  // disp channels are (x, y, z) displacements in voxel units
  double sx = static_cast<double>(x) + disp[q];
  double sy = static_cast<double>(y) + disp[n + q];
  double sz = static_cast<double>(z) + disp[2 * n + q];
  const bool in_x = sx > 0.0 && sx < w - 1;
  const bool in_y = sy > 0.0 && sy < h - 1;
  const bool in_z = sz > 0.0 && sz < d - 1;
  sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
  sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
  sz = std::clamp(sz, 0.0, static_cast<double>(d - 1));
  const int x0 = std::min(static_cast<int>(sx), w - 2);
  const int y0 = std::min(static_cast<int>(sy), h - 2);
  const int z0 = std::min(static_cast<int>(sz), d - 2);
  const double fx = sx - x0, fy = sy - y0, fz = sz - z0;
  auto at = [&](int zz, int yy, int xx) {
    return img[(static_cast<std::size_t>(zz) * h + yy) * w + xx];
  };
  const double c000 = at(z0, y0, x0), c001 = at(z0, y0, x0 + 1);
  const double c010 = at(z0, y0 + 1, x0), c011 = at(z0, y0 + 1, x0 + 1);
  const double c100 = at(z0 + 1, y0, x0), c101 = at(z0 + 1, y0, x0 + 1);
  const double c110 = at(z0 + 1, y0 + 1, x0), c111 = at(z0 + 1, y0 + 1, x0 + 1);
  const double c00 = c000 + (c001 - c000) * fx;
  const double c01 = c010 + (c011 - c010) * fx;
  const double c10 = c100 + (c101 - c100) * fx;
  const double c11 = c110 + (c111 - c110) * fx;
  const double c0 = c00 + (c01 - c00) * fy;
  const double c1 = c10 + (c11 - c10) * fy;
  WarpSample s;
  s.value = c0 + (c1 - c0) * fz;
  // partials w.r.t. the continuous sample position; zero where clamped
  const double dx0 = (c001 - c000) + ((c011 - c010) - (c001 - c000)) * fy;
  const double dx1 = (c101 - c100) + ((c111 - c110) - (c101 - c100)) * fy;
  s.dvx = in_x ? dx0 + (dx1 - dx0) * fz : 0.0;
  const double dy0 = c01 - c00;
  const double dy1 = c11 - c10;
  s.dvy = in_y ? dy0 + (dy1 - dy0) * fz : 0.0;
  s.dvz = in_z ? c1 - c0 : 0.0;
  return s;
}

inline int nearest_of(const double* a, int i, const double* b, int nb) {
  const double ax = a[3 * i], ay = a[3 * i + 1], az = a[3 * i + 2];
  int best = 0;
  double best_d = (ax - b[0]) * (ax - b[0]) + (ay - b[1]) * (ay - b[1]) +
                  (az - b[2]) * (az - b[2]);
  for (int j = 1; j < nb; ++j) {
    const double dx = ax - b[3 * j], dy = ay - b[3 * j + 1], dz = az - b[3 * j + 2];
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < best_d) {  // strict: lowest index wins ties
      best_d = d;
      best = j;
    }
  }
  return best;
}

}  // namespace

// ---- serial reference implementations ----

namespace serial {

void conv2d_forward(const Conv2dDims& dm, const double* x, const double* w,
                    const double* bias, double* y) {
  for (int co = 0; co < dm.cout; ++co)
    for (int oy = 0; oy < dm.oh; ++oy)
      for (int ox = 0; ox < dm.ow; ++ox)
        y[(static_cast<std::size_t>(co) * dm.oh + oy) * dm.ow + ox] =
            conv2d_out_at(dm, x, w, bias, co, oy, ox);
}

void conv2d_grad_input(const Conv2dDims& dm, const double* gy, const double* w,
                       double* gx) {
  for (int ci = 0; ci < dm.cin; ++ci)
    for (int iy = 0; iy < dm.h; ++iy)
      for (int ix = 0; ix < dm.w; ++ix)
        gx[(static_cast<std::size_t>(ci) * dm.h + iy) * dm.w + ix] +=
            conv2d_gx_at(dm, gy, w, ci, iy, ix);
}

void conv2d_grad_weight(const Conv2dDims& dm, const double* gy, const double* x,
                        double* gw) {
  for (int co = 0; co < dm.cout; ++co)
    for (int ci = 0; ci < dm.cin; ++ci)
      for (int ky = 0; ky < dm.kh; ++ky)
        for (int kx = 0; kx < dm.kw; ++kx)
          gw[((static_cast<std::size_t>(co) * dm.cin + ci) * dm.kh + ky) * dm.kw + kx] +=
              conv2d_gw_at(dm, gy, x, co, ci, ky, kx);
}

void conv3d_forward(const Conv3dDims& dm, const double* x, const double* w,
                    const double* bias, double* y) {
  for (int co = 0; co < dm.cout; ++co)
    for (int oz = 0; oz < dm.od; ++oz)
      for (int oy = 0; oy < dm.oh; ++oy)
        for (int ox = 0; ox < dm.ow; ++ox) {
          const std::size_t idx =
              ((static_cast<std::size_t>(co) * dm.od + oz) * dm.oh + oy) * dm.ow + ox;
          y[idx] = conv3d_out_at(dm, x, w, bias, co, oz, oy, ox);
        }
}

void conv3d_grad_input(const Conv3dDims& dm, const double* gy, const double* w,
                       double* gx) {
  for (int ci = 0; ci < dm.cin; ++ci)
    for (int iz = 0; iz < dm.d; ++iz)
      for (int iy = 0; iy < dm.h; ++iy)
        for (int ix = 0; ix < dm.w; ++ix)
          gx[((static_cast<std::size_t>(ci) * dm.d + iz) * dm.h + iy) * dm.w + ix] +=
              conv3d_gx_at(dm, gy, w, ci, iz, iy, ix);
}

void conv3d_grad_weight(const Conv3dDims& dm, const double* gy, const double* x,
                        double* gw) {
  for (int co = 0; co < dm.cout; ++co)
    for (int ci = 0; ci < dm.cin; ++ci)
      for (int kz = 0; kz < dm.kd; ++kz)
        for (int ky = 0; ky < dm.kh; ++ky)
          for (int kx = 0; kx < dm.kw; ++kx)
            gw[(((static_cast<std::size_t>(co) * dm.cin + ci) * dm.kd + kz) * dm.kh +
                ky) *
                   dm.kw +
               kx] += conv3d_gw_at(dm, gy, x, co, ci, kz, ky, kx);
}

void channel_sum(int channels, std::size_t spatial, const double* g, double* out) {
  for (int c = 0; c < channels; ++c) {
    double acc = 0.0;
    const double* gc = g + static_cast<std::size_t>(c) * spatial;
    for (std::size_t i = 0; i < spatial; ++i) acc += gc[i];
    out[c] += acc;
  }
}

void warp_forward(int d, int h, int w, const double* img, const double* disp,
                  double* out) {
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(static_cast<std::size_t>(z) * h + y) * w + x] =
            warp_sample_at(d, h, w, img, disp, z, y, x).value;
}

void warp_grad_disp(int d, int h, int w, const double* img, const double* disp,
                    const double* gy, double* gdisp) {
  const std::size_t n = static_cast<std::size_t>(d) * h * w;
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t q = (static_cast<std::size_t>(z) * h + y) * w + x;
        const WarpSample s = warp_sample_at(d, h, w, img, disp, z, y, x);
        gdisp[q] += gy[q] * s.dvx;
        gdisp[n + q] += gy[q] * s.dvy;
        gdisp[2 * n + q] += gy[q] * s.dvz;
      }
}

void nearest_brute(const double* a, int na, const double* b, int nb, int* nn) {
  for (int i = 0; i < na; ++i) nn[i] = nearest_of(a, i, b, nb);
}

}  // namespace serial

// ---- OpenMP implementations ----

namespace par {

void conv2d_forward(const Conv2dDims& dm, const double* x, const double* w,
                    const double* bias, double* y) {
  const int total = dm.cout * dm.oh;
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int t = 0; t < total; ++t) {
    const int co = t / dm.oh;
    const int oy = t % dm.oh;
    for (int ox = 0; ox < dm.ow; ++ox)
      y[(static_cast<std::size_t>(co) * dm.oh + oy) * dm.ow + ox] =
          conv2d_out_at(dm, x, w, bias, co, oy, ox);
  }
}

void conv2d_grad_input(const Conv2dDims& dm, const double* gy, const double* w,
                       double* gx) {
  const int total = dm.cin * dm.h;
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int t = 0; t < total; ++t) {
    const int ci = t / dm.h;
    const int iy = t % dm.h;
    for (int ix = 0; ix < dm.w; ++ix)
      gx[(static_cast<std::size_t>(ci) * dm.h + iy) * dm.w + ix] +=
          conv2d_gx_at(dm, gy, w, ci, iy, ix);
  }
}

void conv2d_grad_weight(const Conv2dDims& dm, const double* gy, const double* x,
                        double* gw) {
  const int total = dm.cout * dm.cin;
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int t = 0; t < total; ++t) {
    const int co = t / dm.cin;
    const int ci = t % dm.cin;
    for (int ky = 0; ky < dm.kh; ++ky)
      for (int kx = 0; kx < dm.kw; ++kx)
        gw[((static_cast<std::size_t>(co) * dm.cin + ci) * dm.kh + ky) * dm.kw + kx] +=
            conv2d_gw_at(dm, gy, x, co, ci, ky, kx);
  }
}

void conv3d_forward(const Conv3dDims& dm, const double* x, const double* w,
                    const double* bias, double* y) {
  const int total = dm.cout * dm.od * dm.oh;
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int t = 0; t < total; ++t) {
    const int co = t / (dm.od * dm.oh);
    const int oz = (t / dm.oh) % dm.od;
    const int oy = t % dm.oh;
    for (int ox = 0; ox < dm.ow; ++ox)
      y[((static_cast<std::size_t>(co) * dm.od + oz) * dm.oh + oy) * dm.ow + ox] =
          conv3d_out_at(dm, x, w, bias, co, oz, oy, ox);
  }
}

void conv3d_grad_input(const Conv3dDims& dm, const double* gy, const double* w,
                       double* gx) {
  const int total = dm.cin * dm.d * dm.h;
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int t = 0; t < total; ++t) {
    const int ci = t / (dm.d * dm.h);
    const int iz = (t / dm.h) % dm.d;
    const int iy = t % dm.h;
    for (int ix = 0; ix < dm.w; ++ix)
      gx[((static_cast<std::size_t>(ci) * dm.d + iz) * dm.h + iy) * dm.w + ix] +=
          conv3d_gx_at(dm, gy, w, ci, iz, iy, ix);
  }
}

void conv3d_grad_weight(const Conv3dDims& dm, const double* gy, const double* x,
                        double* gw) {
  const int total = dm.cout * dm.cin;
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int t = 0; t < total; ++t) {
    const int co = t / dm.cin;
    const int ci = t % dm.cin;
    for (int kz = 0; kz < dm.kd; ++kz)
      for (int ky = 0; ky < dm.kh; ++ky)
        for (int kx = 0; kx < dm.kw; ++kx)
          gw[(((static_cast<std::size_t>(co) * dm.cin + ci) * dm.kd + kz) * dm.kh + ky) *
                 dm.kw +
             kx] += conv3d_gw_at(dm, gy, x, co, ci, kz, ky, kx);
  }
}

void channel_sum(int channels, std::size_t spatial, const double* g, double* out) {
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int c = 0; c < channels; ++c) {
    double acc = 0.0;
    const double* gc = g + static_cast<std::size_t>(c) * spatial;
    for (std::size_t i = 0; i < spatial; ++i) acc += gc[i];
    out[c] += acc;
  }
}

void warp_forward(int d, int h, int w, const double* img, const double* disp,
                  double* out) {
  const int total = d * h;
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int t = 0; t < total; ++t) {
    const int z = t / h;
    const int y = t % h;
    for (int x = 0; x < w; ++x)
      out[(static_cast<std::size_t>(z) * h + y) * w + x] =
          warp_sample_at(d, h, w, img, disp, z, y, x).value;
  }
}

void warp_grad_disp(int d, int h, int w, const double* img, const double* disp,
                    const double* gy, double* gdisp) {
  const std::size_t n = static_cast<std::size_t>(d) * h * w;
  const int total = d * h;
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int t = 0; t < total; ++t) {
    const int z = t / h;
    const int y = t % h;
    for (int x = 0; x < w; ++x) {
      const std::size_t q = (static_cast<std::size_t>(z) * h + y) * w + x;
      const WarpSample s = warp_sample_at(d, h, w, img, disp, z, y, x);
      gdisp[q] += gy[q] * s.dvx;
      gdisp[n + q] += gy[q] * s.dvy;
      gdisp[2 * n + q] += gy[q] * s.dvz;
    }
  }
}

void nearest_brute(const double* a, int na, const double* b, int nb, int* nn) {
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int i = 0; i < na; ++i) nn[i] = nearest_of(a, i, b, nb);
}

}  // namespace par

// ---- dispatchers ----

#define MESHTRACK_DISPATCH(fn, ...)          \
  do {                                       \
    if (threading::parallel_enabled())       \
      par::fn(__VA_ARGS__);                  \
    else                                     \
      serial::fn(__VA_ARGS__);               \
  } while (0)

void conv2d_forward(const Conv2dDims& dm, const double* x, const double* w,
                    const double* bias, double* y) {
  MESHTRACK_DISPATCH(conv2d_forward, dm, x, w, bias, y);
}
void conv2d_grad_input(const Conv2dDims& dm, const double* gy, const double* w,
                       double* gx) {
  MESHTRACK_DISPATCH(conv2d_grad_input, dm, gy, w, gx);
}
void conv2d_grad_weight(const Conv2dDims& dm, const double* gy, const double* x,
                        double* gw) {
  MESHTRACK_DISPATCH(conv2d_grad_weight, dm, gy, x, gw);
}
void conv3d_forward(const Conv3dDims& dm, const double* x, const double* w,
                    const double* bias, double* y) {
  MESHTRACK_DISPATCH(conv3d_forward, dm, x, w, bias, y);
}
void conv3d_grad_input(const Conv3dDims& dm, const double* gy, const double* w,
                       double* gx) {
  MESHTRACK_DISPATCH(conv3d_grad_input, dm, gy, w, gx);
}
void conv3d_grad_weight(const Conv3dDims& dm, const double* gy, const double* x,
                        double* gw) {
  MESHTRACK_DISPATCH(conv3d_grad_weight, dm, gy, x, gw);
}
void channel_sum(int channels, std::size_t spatial, const double* g, double* out) {
  MESHTRACK_DISPATCH(channel_sum, channels, spatial, g, out);
}
void warp_forward(int d, int h, int w, const double* img, const double* disp,
                  double* out) {
  MESHTRACK_DISPATCH(warp_forward, d, h, w, img, disp, out);
}
void warp_grad_disp(int d, int h, int w, const double* img, const double* disp,
                    const double* gy, double* gdisp) {
  MESHTRACK_DISPATCH(warp_grad_disp, d, h, w, img, disp, gy, gdisp);
}
void nearest_brute(const double* a, int na, const double* b, int nb, int* nn) {
  MESHTRACK_DISPATCH(nearest_brute, a, na, b, nb, nn);
}

#undef MESHTRACK_DISPATCH

// ---- grid-accelerated exact nearest neighbors ----

namespace {

struct PointGrid {
  double cell;
  double min[3];
  int dims[3];
  std::vector<std::vector<int>> cells;  // point indices, ascending

  int cell_of(double v, int axis) const {
    int c = static_cast<int>((v - min[axis]) / cell);
    return std::clamp(c, 0, dims[axis] - 1);
  }
  std::size_t flat(int cx, int cy, int cz) const {
    return (static_cast<std::size_t>(cz) * dims[1] + cy) * dims[0] + cx;
  }
};

PointGrid build_grid(const double* b, int nb) {
  PointGrid g;
  double mx[3];
  for (int a = 0; a < 3; ++a) {
    g.min[a] = b[a];
    mx[a] = b[a];
  }
  for (int j = 1; j < nb; ++j)
    for (int a = 0; a < 3; ++a) {
      g.min[a] = std::min(g.min[a], b[3 * j + a]);
      mx[a] = std::max(mx[a], b[3 * j + a]);
    }
  double extent = 0;
  for (int a = 0; a < 3; ++a) extent = std::max(extent, mx[a] - g.min[a]);
  // Aim for a few points per cell.
  const int target = std::max(1, static_cast<int>(std::cbrt(nb / 4.0)));
  g.cell = extent > 0 ? extent / target : 1.0;
  if (g.cell <= 0) g.cell = 1.0;
  for (int a = 0; a < 3; ++a)
    g.dims[a] = std::max(1, static_cast<int>((mx[a] - g.min[a]) / g.cell) + 1);
  g.cells.resize(static_cast<std::size_t>(g.dims[0]) * g.dims[1] * g.dims[2]);
  for (int j = 0; j < nb; ++j)
    g.cells[g.flat(g.cell_of(b[3 * j], 0), g.cell_of(b[3 * j + 1], 1),
                   g.cell_of(b[3 * j + 2], 2))]
        .push_back(j);
  return g;
}

int nearest_in_grid(const PointGrid& g, const double* b, double ax, double ay,
                    double az) {
  const int cx = g.cell_of(ax, 0), cy = g.cell_of(ay, 1), cz = g.cell_of(az, 2);
  int best = -1;
  double best_d = 0;
  // Expand rings until the closed ring bound exceeds the best distance.
  const int max_ring = std::max({g.dims[0], g.dims[1], g.dims[2]});
  for (int ring = 0; ring <= max_ring; ++ring) {
    if (best >= 0) {
      // Any point beyond this ring is at least (ring-1)*cell away from the
      // query's cell boundary; stop once that cannot beat the best.
      const double bound = (ring - 1) * g.cell;
      if (bound > 0 && bound * bound > best_d) break;
    }
    for (int dz = -ring; dz <= ring; ++dz) {
      const int zc = cz + dz;
      if (zc < 0 || zc >= g.dims[2]) continue;
      for (int dy = -ring; dy <= ring; ++dy) {
        const int yc = cy + dy;
        if (yc < 0 || yc >= g.dims[1]) continue;
        for (int dx = -ring; dx <= ring; ++dx) {
          // surface of the ring only
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          const int xc = cx + dx;
          if (xc < 0 || xc >= g.dims[0]) continue;
          for (int j : g.cells[g.flat(xc, yc, zc)]) {
            const double ddx = ax - b[3 * j], ddy = ay - b[3 * j + 1],
                         ddz = az - b[3 * j + 2];
            const double d = ddx * ddx + ddy * ddy + ddz * ddz;
            // lexicographic (distance, index) min matches brute-force ties
            if (best < 0 || d < best_d || (d == best_d && j < best)) {
              best_d = d;
              best = j;
            }
          }
        }
      }
    }
  }
  return best;
}

}  // namespace

void nearest_grid(const double* a, int na, const double* b, int nb, int* nn) {
  const PointGrid g = build_grid(b, nb);
#pragma omp parallel for schedule(static) num_threads(threading::max_threads())
  for (int i = 0; i < na; ++i)
    nn[i] = nearest_in_grid(g, b, a[3 * i], a[3 * i + 1], a[3 * i + 2]);
}

void nearest(const double* a, int na, const double* b, int nb, int* nn) {
  if (nb > nearest_grid_cutoff)
    nearest_grid(a, na, b, nb, nn);
  else
    nearest_brute(a, na, b, nb, nn);
}

}  // namespace meshtrack::kernels
