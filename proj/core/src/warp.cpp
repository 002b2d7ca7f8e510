#include "pulsereg/warp.hpp"

#include <cmath>
#include <string>

#include "pulsereg/ops.hpp"
#include "trilinear.hpp"

namespace pulsereg {

using detail::Trilinear;

namespace {

void require_field_shape(const Shape& field, const Shape& image, const char* op) {
  if (field.size() != 4 || field[0] != 3)
    throw InvalidArgument(std::string(op) + ": field must be 3 x D x H x W, got " + to_string(field));
  if (image.size() != 4) throw InvalidArgument(std::string(op) + ": image must be C x D x H x W");
  for (std::size_t a = 1; a < 4; ++a)
    if (field[a] != image[a])
      throw InvalidArgument(std::string(op) + ": grid mismatch on axis " + image_axis_name(a) + " (image " +
                            std::to_string(image[a]) + ", field " + std::to_string(field[a]) + ")");
}

template <typename T>
std::vector<const T*> field_pointers(std::span<const Array<T>> fields) {
  std::vector<const T*> out;
  for (const auto& f : fields) out.push_back(f.data());
  return out;
}

}  // namespace

template <typename T>
void FieldSet<T>::validate() const {
  if (fields.size() < 2) throw InvalidArgument("FieldSet: need at least 2 fields, got " + std::to_string(fields.size()));
  for (std::size_t n = 0; n < fields.size(); ++n) {
    const auto& s = fields[n].shape;
    if (s.size() != 4 || s[0] != 3)
      throw InvalidArgument("FieldSet: field " + std::to_string(n) + " must be 3 x D x H x W, got " + to_string(s));
    if (s != fields[0].shape)
      throw InvalidArgument("FieldSet: field " + std::to_string(n) + " shape " + to_string(s) + " differs from field 0");
  }
  const Extent3 e{fields[0].shape[3], fields[0].shape[2], fields[0].shape[1]};
  if (!(grid.dims == e)) throw InvalidArgument("FieldSet: grid extents do not match the field arrays");
}

template <typename T>
FieldSet<T> split_field_stack(const Array<T>& stack, const Grid& grid) {
  if (stack.rank() != 4 || stack.dim(0) % 3 != 0)
    throw InvalidArgument("split_field_stack: expected 3N x D x H x W, got " + to_string(stack.shape));
  FieldSet<T> out;
  out.grid = grid;
  for (std::int64_t n = 0; n < stack.dim(0) / 3; ++n) out.fields.push_back(channel_slice(stack, 3 * n, 3));
  return out;
}

template <typename T>
Array<T> join_field_stack(const FieldSet<T>& fs) {
  fs.validate();
  const auto& s = fs.fields[0].shape;
  Array<T> out(Shape{3 * fs.phases(), s[1], s[2], s[3]});
  auto it = out.values.begin();
  for (const auto& f : fs.fields) it = std::copy(f.values.begin(), f.values.end(), it);
  return out;
}

template <typename T>
double sample_clamped(const Array<T>& volume, std::int64_t channel, double x, double y, double z) {
  const Trilinear t(x, y, z, volume.dim(1), volume.dim(2), volume.dim(3));
  return t.eval(volume.data() + channel * volume.voxels());
}

template <typename T>
Vec3 sample_vector(const Array<T>& field, Vec3 p) {
  const Trilinear t(p.x, p.y, p.z, field.dim(1), field.dim(2), field.dim(3));
  const auto v = field.voxels();
  return {t.eval(field.data()), t.eval(field.data() + v), t.eval(field.data() + 2 * v)};
}

template <typename T>
Array<T> warp_volume(const Array<T>& image, const Array<T>& field) {
  require_field_shape(field.shape, image.shape, "warp_volume");
  const std::int64_t d = image.dim(1), h = image.dim(2), w = image.dim(3), v = image.voxels();
  Array<T> out(image.shape);
  const T* ux = field.data();
  const T* uy = ux + v;
  const T* uz = uy + v;
  for (std::int64_t z = 0, i = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x, ++i) {
        const Trilinear t(static_cast<double>(x) + static_cast<double>(ux[i]),
                          static_cast<double>(y) + static_cast<double>(uy[i]),
                          static_cast<double>(z) + static_cast<double>(uz[i]), d, h, w);
        for (std::int64_t c = 0; c < image.dim(0); ++c)
          out.values[c * v + i] = static_cast<T>(t.eval(image.data() + c * v));
      }
  return out;
}

template <typename T>
Tensor<T> warp_volume(Graph<T>& g, const Tensor<T>& image, const Tensor<T>& field) {
  if (image.shape().size() != 4 || image.shape()[0] != 1)
    throw InvalidArgument("warp_volume: image tensor must be 1 x D x H x W, got " + to_string(image.shape()));
  Tensor<T> result(warp_volume(image.value(), field.value()), any_requires_grad<T>({&image, &field}));
  if (!result.requires_grad()) return result;
  g.record(result, [image, field, result]() {
    const auto& go = result.grad();
    const auto& img = image.value();
    const std::int64_t d = img.dim(1), h = img.dim(2), w = img.dim(3), v = img.voxels();
    const T* ux = field.value().data();
    const T* uy = ux + v;
    const T* uz = uy + v;
    T* gi = image.requires_grad() ? image.grad_buffer().data() : nullptr;
    T* gf = field.requires_grad() ? field.grad_buffer().data() : nullptr;
    for (std::int64_t z = 0, i = 0; z < d; ++z)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x, ++i) {
          const double gv = static_cast<double>(go[i]);
          if (gv == 0.0) continue;
          const Trilinear t(static_cast<double>(x) + static_cast<double>(ux[i]),
                            static_cast<double>(y) + static_cast<double>(uy[i]),
                            static_cast<double>(z) + static_cast<double>(uz[i]), d, h, w);
          if (gi)
            for (int k = 0; k < 8; ++k) gi[t.index[k]] += static_cast<T>(t.weight[k] * gv);
          if (gf) {
            double dx = 0, dy = 0, dz = 0;
            for (int k = 0; k < 8; ++k) {
              const double s = static_cast<double>(img.values[t.index[k]]);
              dx += t.dwx[k] * s;
              dy += t.dwy[k] * s;
              dz += t.dwz[k] * s;
            }
            gf[i] += static_cast<T>(dx * gv);
            gf[v + i] += static_cast<T>(dy * gv);
            gf[2 * v + i] += static_cast<T>(dz * gv);
          }
        }
  });
  return result;
}

template <typename T>
std::vector<Array<double>> trajectory_positions(std::span<const Array<T>> fields, int start) {
  const int n_phases = static_cast<int>(fields.size());
  if (n_phases < 1) throw InvalidArgument("trajectory_positions: no fields");
  const auto& s = fields[0].shape;
  for (const auto& f : fields)
    if (f.shape != s) throw InvalidArgument("trajectory_positions: fields differ in shape");
  const std::int64_t d = s[1], h = s[2], w = s[3], v = d * h * w;
  std::vector<Array<double>> pos;
  pos.reserve(static_cast<std::size_t>(n_phases) + 1);
  Array<double> p0(Shape{3, d, h, w});
  for (std::int64_t z = 0, i = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x, ++i) {
        p0.values[i] = static_cast<double>(x);
        p0.values[v + i] = static_cast<double>(y);
        p0.values[2 * v + i] = static_cast<double>(z);
      }
  pos.push_back(std::move(p0));
  const int first = ((start % n_phases) + n_phases) % n_phases;
  for (int k = 0; k < n_phases; ++k) {
    const auto& u = fields[static_cast<std::size_t>((first + k) % n_phases)];
    const auto& prev = pos.back();
    Array<double> next(prev.shape);
    for (std::int64_t i = 0; i < v; ++i) {
      const Vec3 p{prev.values[i], prev.values[v + i], prev.values[2 * v + i]};
      const Vec3 du = sample_vector(u, p);
      next.values[i] = p.x + du.x;
      next.values[v + i] = p.y + du.y;
      next.values[2 * v + i] = p.z + du.z;
    }
    pos.push_back(std::move(next));
  }
  return pos;
}

template <typename T>
std::vector<Array<double>> trajectory_positions(const FieldSet<T>& fields, int start) {
  fields.validate();
  return trajectory_positions(std::span<const Array<T>>(fields.fields), start);
}

namespace {

template <typename T>
Array<T> walk(const FieldSet<T>& fields, int i, int steps) {
  fields.validate();
  const int n = fields.phases();
  const auto& s = fields.fields[0].shape;
  const std::int64_t d = s[1], h = s[2], w = s[3], v = d * h * w;
  Array<T> out(s);
  for (std::int64_t z = 0, idx = 0; z < d; ++z)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x, ++idx) {
        const Vec3 start{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        Vec3 p = start;
        for (int k = 0; k < steps; ++k) p = p + sample_vector(fields.fields[static_cast<std::size_t>((i + k) % n)], p);
        const Vec3 disp = p - start;
        out.values[idx] = static_cast<T>(disp.x);
        out.values[v + idx] = static_cast<T>(disp.y);
        out.values[2 * v + idx] = static_cast<T>(disp.z);
      }
  return out;
}

}  // namespace

template <typename T>
Array<T> compose(const FieldSet<T>& fields, int i, int j) {
  const int n = fields.phases();
  if (n < 2) throw InvalidArgument("compose: need at least 2 fields");
  i = ((i % n) + n) % n;
  j = ((j % n) + n) % n;
  if (i == j) throw InvalidArgument("compose: source and target phase are both " + std::to_string(i));
  return walk(fields, i, ((j - i) % n + n) % n);
}

template <typename T>
Array<T> closure_defect(const FieldSet<T>& fields, int start) {
  const int n = fields.phases();
  if (n < 2) throw InvalidArgument("closure_defect: need at least 2 fields");
  return walk(fields, ((start % n) + n) % n, n);
}

template <typename T>
WarpedPoints warp_points(std::span<const Vec3> points_mm, const Array<T>& field, const Grid& grid) {
  if (field.rank() != 4 || field.dim(0) != 3 || field.dim(3) != grid.dims.x || field.dim(2) != grid.dims.y ||
      field.dim(1) != grid.dims.z)
    throw InvalidArgument("warp_points: field " + to_string(field.shape) + " does not match the grid");
  WarpedPoints out;
  out.points.reserve(points_mm.size());
  out.out_of_bounds.reserve(points_mm.size());
  for (const Vec3& p : points_mm) {
    const Vec3 vox = grid.to_voxel(p);
    out.out_of_bounds.push_back(!grid.contains_voxel(vox));
    const Vec3 u = sample_vector(field, vox);
    out.points.push_back(grid.to_mm(vox + u));
  }
  return out;
}

#define PULSEREG_INSTANTIATE_WARP(T)                                                                  \
  template struct FieldSet<T>;                                                                        \
  template FieldSet<T> split_field_stack<T>(const Array<T>&, const Grid&);                            \
  template Array<T> join_field_stack<T>(const FieldSet<T>&);                                          \
  template double sample_clamped<T>(const Array<T>&, std::int64_t, double, double, double);           \
  template Vec3 sample_vector<T>(const Array<T>&, Vec3);                                              \
  template Array<T> warp_volume<T>(const Array<T>&, const Array<T>&);                                 \
  template Tensor<T> warp_volume<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template std::vector<Array<double>> trajectory_positions<T>(std::span<const Array<T>>, int);        \
  template std::vector<Array<double>> trajectory_positions<T>(const FieldSet<T>&, int);               \
  template Array<T> compose<T>(const FieldSet<T>&, int, int);                                         \
  template Array<T> closure_defect<T>(const FieldSet<T>&, int);                                       \
  template WarpedPoints warp_points<T>(std::span<const Vec3>, const Array<T>&, const Grid&);

PULSEREG_INSTANTIATE_WARP(float)
PULSEREG_INSTANTIATE_WARP(double)

}  // namespace pulsereg
