#pragma once

#include <array>
#include <cstddef>

namespace meshtrack::kernels {

// Raw-array compute kernels behind the tensor operations. Every kernel comes
// in two builds: a plain serial reference under kernels::serial and an
// OpenMP version under kernels::par. Both share the same per-element code,
// so they agree bitwise for any thread count; the unqualified entry points
// dispatch on threading::parallel_enabled().

struct Conv2dDims {
  int cin, h, w;
  int cout, kh, kw;
  int stride, pad;
  int oh, ow;
  static Conv2dDims make(int cin, int h, int w, int cout, int kh, int kw,
                         int stride, int pad);
};

struct Conv3dDims {
  int cin, d, h, w;
  int cout, kd, kh, kw;
  std::array<int, 3> stride, pad;
  int od, oh, ow;
  static Conv3dDims make(int cin, int d, int h, int w, int cout, int kd,
                         int kh, int kw, std::array<int, 3> stride,
                         std::array<int, 3> pad);
  // Dims for a transposed convolution taking [cin_t, d, h, w] to the
  // (in-1)*stride - 2*pad + k extents; expressed as the matching forward
  // conv so the transpose reuses the conv kernels with roles swapped.
  static Conv3dDims make_transposed(int cin_t, int d, int h, int w, int cout_t,
                                    int kd, int kh, int kw,
                                    std::array<int, 3> stride,
                                    std::array<int, 3> pad);
};

#define MESHTRACK_DECLARE_KERNELS                                             \
  void conv2d_forward(const Conv2dDims& dm, const double* x, const double* w, \
                      const double* bias, double* y);                         \
  void conv2d_grad_input(const Conv2dDims& dm, const double* gy,              \
                         const double* w, double* gx);                        \
  void conv2d_grad_weight(const Conv2dDims& dm, const double* gy,             \
                          const double* x, double* gw);                       \
  void conv3d_forward(const Conv3dDims& dm, const double* x, const double* w, \
                      const double* bias, double* y);                         \
  void conv3d_grad_input(const Conv3dDims& dm, const double* gy,              \
                         const double* w, double* gx);                        \
  void conv3d_grad_weight(const Conv3dDims& dm, const double* gy,             \
                          const double* x, double* gw);                       \
  /* per-channel sum over the trailing spatial extent */                      \
  void channel_sum(int channels, std::size_t spatial, const double* g,        \
                   double* out);                                              \
  /* backward image warp: out(q) = img(q + disp(q)), trilinear, clamped.      \
     img [d,h,w]; disp [3,d,h,w] in voxel units (x,y,z channels). */          \
  void warp_forward(int d, int h, int w, const double* img,                   \
                    const double* disp, double* out);                         \
  void warp_grad_disp(int d, int h, int w, const double* img,                 \
                      const double* disp, const double* gy, double* gdisp);   \
  /* index of the nearest point of b for every point of a (ties -> lowest     \
     index); exact brute force */                                             \
  void nearest_brute(const double* a, int na, const double* b, int nb,        \
                     int* nn);

namespace serial {
MESHTRACK_DECLARE_KERNELS
}
namespace par {
MESHTRACK_DECLARE_KERNELS
}
MESHTRACK_DECLARE_KERNELS

#undef MESHTRACK_DECLARE_KERNELS

// Exact nearest neighbors via a uniform spatial grid; agrees with
// nearest_brute including tie-breaks. Used above the brute-force cutoff.
void nearest_grid(const double* a, int na, const double* b, int nb, int* nn);

// Dispatching nearest-neighbor search: brute force below `grid_cutoff`
// points, spatial grid above. Results are identical either way.
void nearest(const double* a, int na, const double* b, int nb, int* nn);
inline constexpr int nearest_grid_cutoff = 5000;

}  // namespace meshtrack::kernels
