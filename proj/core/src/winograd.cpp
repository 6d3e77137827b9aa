#include "upsearch/winograd.hpp"

#include <Eigen/Dense>

namespace upsearch {

template <typename T>
void direct_conv(const T* in, int c_in, int h, int w, const T* kern, int c_out, int ksize,
                 int stride, T* out) {
  if (h < ksize || w < ksize || stride < 1)
    throw ShapeError("direct_conv: input smaller than kernel or bad stride");
  int oh = (h - ksize) / stride + 1;
  int ow = (w - ksize) / stride + 1;
  for (int o = 0; o < c_out; ++o)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        T acc = T(0);
        for (int i = 0; i < c_in; ++i) {
          const T* inp = in + (static_cast<std::size_t>(i) * h + y * stride) * w + x * stride;
          const T* kp = kern + (static_cast<std::size_t>(o) * c_in + i) * ksize * ksize;
          for (int r = 0; r < ksize; ++r)
            for (int c = 0; c < ksize; ++c) acc += kp[r * ksize + c] * inp[r * w + c];
        }
        out[(static_cast<std::size_t>(o) * oh + y) * ow + x] = acc;
      }
}

namespace {

// F(2x2, 3x3) transform matrices.
//   kernel: U = G g G^T, input: V = B^T d B, output: Y = A^T (U .* V) A
template <typename T>
struct Transforms {
  // G is 4x3, BT is 4x4, AT is 2x4.
  static constexpr T G[4][3] = {{1, 0, 0}, {T(0.5), T(0.5), T(0.5)}, {T(0.5), T(-0.5), T(0.5)}, {0, 0, 1}};
  static constexpr T BT[4][4] = {{1, 0, -1, 0}, {0, 1, 1, 0}, {0, -1, 1, 0}, {0, 1, 0, -1}};
  static constexpr T AT[2][4] = {{1, 1, 1, 0}, {0, 1, -1, -1}};
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

template <typename T>
WinogradKernel<T> transform_winograd_kernel(const T* kern, int c_out, int c_in) {
  WinogradKernel<T> wk;
  wk.c_out = c_out;
  wk.c_in = c_in;
  wk.u.assign(static_cast<std::size_t>(16) * c_out * c_in, T(0));
  const auto& G = Transforms<T>::G;
  for (int o = 0; o < c_out; ++o)
    for (int i = 0; i < c_in; ++i) {
      const T* g = kern + (static_cast<std::size_t>(o) * c_in + i) * 9;
      // tmp = G g  (4x3)
      T tmp[4][3];
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c)
          tmp[r][c] = G[r][0] * g[0 * 3 + c] + G[r][1] * g[1 * 3 + c] + G[r][2] * g[2 * 3 + c];
      // u = tmp G^T (4x4)
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
          T v = tmp[r][0] * G[c][0] + tmp[r][1] * G[c][1] + tmp[r][2] * G[c][2];
          int xi = r * 4 + c;
          wk.u[(static_cast<std::size_t>(xi) * c_out + o) * c_in + i] = v;
        }
    }
  return wk;
}

template <typename T>
void winograd_conv(const T* in, int c_in, int h, int w, const WinogradKernel<T>& wk, T* out) {
  if (c_in != wk.c_in) throw ShapeError("winograd_conv: channel mismatch");
  if (h < 3 || w < 3) throw ShapeError("winograd_conv: input smaller than kernel");
  int c_out = wk.c_out;
  int oh = h - 2;
  int ow = w - 2;
  int ty = (oh + 1) / 2;
  int tx = (ow + 1) / 2;
  int ntiles = ty * tx;

  const auto& BT = Transforms<T>::BT;
  const auto& AT = Transforms<T>::AT;

  // Scatter the transformed input into 16 (c_in x ntiles) matrices.
  std::vector<Mat<T>> V(16, Mat<T>::Zero(c_in, ntiles));
  for (int i = 0; i < c_in; ++i) {
    const T* plane = in + static_cast<std::size_t>(i) * h * w;
    for (int t = 0; t < ntiles; ++t) {
      int y0 = (t / tx) * 2;
      int x0 = (t % tx) * 2;
      // 4x4 input patch, zero beyond the border (odd-extent padding).
      T d[4][4];
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
          int yy = y0 + r, xx = x0 + c;
          d[r][c] = (yy < h && xx < w) ? plane[yy * w + xx] : T(0);
        }
      T tmp[4][4];
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c)
          tmp[r][c] = BT[r][0] * d[0][c] + BT[r][1] * d[1][c] + BT[r][2] * d[2][c] +
                      BT[r][3] * d[3][c];
      for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
          T v = tmp[r][0] * BT[c][0] + tmp[r][1] * BT[c][1] + tmp[r][2] * BT[c][2] +
                tmp[r][3] * BT[c][3];
          V[r * 4 + c](i, t) = v;
        }
    }
  }

  // The elementwise product becomes 16 dense (c_out x c_in) * (c_in x ntiles)
  // multiplications; this is where nearly all arithmetic lives.
  std::vector<Mat<T>> M(16);
  for (int xi = 0; xi < 16; ++xi) {
    Eigen::Map<const Mat<T>> U(wk.u.data() + static_cast<std::size_t>(xi) * c_out * c_in, c_out,
                               c_in);
    M[xi] = U * V[xi];
  }

  // Inverse transform per (output channel, tile), cropping odd edges.
  for (int o = 0; o < c_out; ++o) {
    T* plane = out + static_cast<std::size_t>(o) * oh * ow;
    for (int t = 0; t < ntiles; ++t) {
      T m[4][4];
      for (int xi = 0; xi < 16; ++xi) m[xi / 4][xi % 4] = M[xi](o, t);
      T tmp[2][4];
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 4; ++c)
          tmp[r][c] = AT[r][0] * m[0][c] + AT[r][1] * m[1][c] + AT[r][2] * m[2][c] +
                      AT[r][3] * m[3][c];
      T y[2][2];
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c)
          y[r][c] = tmp[r][0] * AT[c][0] + tmp[r][1] * AT[c][1] + tmp[r][2] * AT[c][2] +
                    tmp[r][3] * AT[c][3];
      int y0 = (t / tx) * 2;
      int x0 = (t % tx) * 2;
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
          int yy = y0 + r, xx = x0 + c;
          if (yy < oh && xx < ow) plane[yy * ow + xx] = y[r][c];
        }
    }
  }
}

template <typename T>
void winograd_conv(const T* in, int c_in, int h, int w, const T* kern, int c_out, T* out) {
  WinogradKernel<T> wk = transform_winograd_kernel(kern, c_out, c_in);
  winograd_conv(in, c_in, h, w, wk, out);
}

bool winograd_eligible(const LayerSpec& spec) {
  return (spec.kind == LayerKind::Conv2d || spec.kind == LayerKind::DepthwiseConv2d) &&
         spec.kernel == 3 && spec.stride == 1;
}

WinogradCost arithmetic_ratio(const LayerSpec& spec) {
  if (!winograd_eligible(spec))
    throw ShapeError("layer " + std::to_string(spec.id) +
                     ": winograd needs a 3x3 stride-1 convolution stage");
  WinogradCost cost;
  cost.direct_mults_per_tile = 36;   // 2x2 outputs x 9 taps
  cost.winograd_mults_per_tile = 16;  // one product per transform cell
  cost.arithmetic_ratio = 36.0 / 16.0;
  return cost;
}

long long winograd_tile_count(int out_h, int out_w) {
  return static_cast<long long>((out_h + 1) / 2) * ((out_w + 1) / 2);
}

template void direct_conv<float>(const float*, int, int, int, const float*, int, int, int, float*);
template void direct_conv<double>(const double*, int, int, int, const double*, int, int, int,
                                  double*);
template WinogradKernel<float> transform_winograd_kernel<float>(const float*, int, int);
template WinogradKernel<double> transform_winograd_kernel<double>(const double*, int, int);
template void winograd_conv<float>(const float*, int, int, int, const WinogradKernel<float>&,
                                   float*);
template void winograd_conv<double>(const double*, int, int, int, const WinogradKernel<double>&,
                                    double*);
template void winograd_conv<float>(const float*, int, int, int, const float*, int, float*);
template void winograd_conv<double>(const double*, int, int, int, const double*, int, double*);

}  // namespace upsearch
