#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "meshtrack/geom.hpp"
#include "meshtrack/tensor.hpp"

namespace meshtrack {

// Triangle mesh in world millimeters. Vertices are an N x 3 row-major array,
// faces an M x 3 index array (counter-clockwise, 0-based).
struct SurfaceMesh {
  std::vector<double> vertices;
  std::vector<int> faces;

  int vertex_count() const { return static_cast<int>(vertices.size() / 3); }
  int face_count() const { return static_cast<int>(faces.size() / 3); }

  Vec3 vertex(int i) const {
    const std::size_t k = static_cast<std::size_t>(i) * 3;
    return {vertices[k], vertices[k + 1], vertices[k + 2]};
  }
  void set_vertex(int i, const Vec3& v) {
    const std::size_t k = static_cast<std::size_t>(i) * 3;
    vertices[k] = v.x;
    vertices[k + 1] = v.y;
    vertices[k + 2] = v.z;
  }

  // Validates the invariants: non-empty, indices in range, no repeated index
  // within a face.
  static SurfaceMesh create(std::vector<double> vertices, std::vector<int> faces);
};

// Per-vertex 3D displacement, row count tied to a companion mesh.
struct VertexDisplacement {
  std::vector<double> values;  // N x 3
  int count() const { return static_cast<int>(values.size() / 3); }

  static VertexDisplacement zero(int n) {
    return {std::vector<double>(static_cast<std::size_t>(n) * 3, 0.0)};
  }
};

// Edge adjacency derived from faces, CSR layout, neighbor lists sorted.
class AdjacencyTable {
 public:
  static AdjacencyTable from_faces(int vertex_count, std::span<const int> faces);

  int vertex_count() const { return static_cast<int>(offsets_.size()) - 1; }
  std::span<const int> neighbors(int i) const {
    return {items_.data() + offsets_[static_cast<std::size_t>(i)],
            items_.data() + offsets_[static_cast<std::size_t>(i) + 1]};
  }
  int degree(int i) const {
    return offsets_[static_cast<std::size_t>(i) + 1] - offsets_[static_cast<std::size_t>(i)];
  }

 private:
  std::vector<int> offsets_;
  std::vector<int> items_;
};

SurfaceMesh apply_displacement(const SurfaceMesh& mesh, const VertexDisplacement& dv);

// Mean over vertices of || v_i - mean of neighbors ||. Rejects isolated
// vertices. The tensor overload differentiates w.r.t. the vertices.
Tensor laplacian_loss(const Tensor& vertices, const AdjacencyTable& adj);
double laplacian_loss(const SurfaceMesh& mesh, const AdjacencyTable& adj);

// Symmetric mean squared nearest-neighbor distance between two point sets.
// Differentiable w.r.t. both sets; on equidistant neighbors the lowest index
// wins and receives the gradient.
Tensor chamfer_loss(const Tensor& a, const Tensor& b);
double chamfer_loss(const std::vector<double>& a, const std::vector<double>& b);

// ASCII OBJ (v/f records, triangles only).
SurfaceMesh load_mesh(const std::filesystem::path& path);
void save_mesh(const SurfaceMesh& mesh, const std::filesystem::path& path);

// [N,3] constant tensor view of the vertices.
Tensor vertices_tensor(const SurfaceMesh& mesh);

}  // namespace meshtrack
