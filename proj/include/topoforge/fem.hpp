#pragma once

// Plane-stress finite element analysis on a regular grid of unit-square
// bilinear quadrilaterals.
//
// Nodes are numbered column by column (y fastest): node (col, row) has index
// col * (nely + 1) + row, with row 0 on the top edge. Each node carries two
// dofs, ux at 2 * node and uy at 2 * node + 1.

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <array>
#include <memory>
#include <vector>

#include "topoforge/density_field.hpp"

namespace topoforge::fem {

struct MeshSpec {
  int nelx = 60;
  int nely = 20;
  double young = 1.0;
  double poisson = 0.3;
  double thickness = 1.0;

  void validate() const;
  [[nodiscard]] int node_count() const { return (nelx + 1) * (nely + 1); }
  [[nodiscard]] int dof_count() const { return 2 * node_count(); }
  [[nodiscard]] int element_count() const { return nelx * nely; }
  [[nodiscard]] int node_index(int col, int row) const { return col * (nely + 1) + row; }
};

struct PointLoad {
  int dof = 0;
  double value = 0.0;
};

struct LoadCase {
  std::vector<int> fixed_dofs;
  std::vector<PointLoad> loads;

  /// Throws ParameterError for out-of-range dofs, loads on fixed dofs, or an
  /// empty support set.
  void validate(const MeshSpec& mesh) const;
};

/// Left edge fully clamped, load of `magnitude` in y on the middle node of the
/// right edge (node row nely / 2). The default magnitude is -1.
LoadCase cantilever_load(const MeshSpec& mesh, double magnitude = -1.0);

using ElementMatrix = Eigen::Matrix<double, 8, 8>;

/// Closed-form stiffness of a unit-square bilinear quad in plane stress. Local
/// node order is upper-left, upper-right, lower-right, lower-left in grid
/// coordinates, dofs interleaved (ux, uy).
ElementMatrix element_stiffness(double young, double poisson, double thickness = 1.0);

/// Global dofs of element (elx, ely) in the local order of element_stiffness.
std::array<int, 8> element_dofs(const MeshSpec& mesh, int elx, int ely);

enum class SolverKind {
  kCholesky,           // sparse simplicial Cholesky, AMD ordering
  kConjugateGradient,  // Jacobi-preconditioned CG
  kDense,              // dense LLT, small meshes only
};

struct SolveOptions {
  SolverKind solver = SolverKind::kCholesky;
  double cg_tolerance = 1e-8;
  int cg_max_iterations = 0;  // 0 selects 10 * free dof count
  double residual_tolerance = 1e-8;
};

/// Largest element count accepted by SolverKind::kDense.
inline constexpr int kDenseElementLimit = 16 * 16;

struct SolveResult {
  std::vector<double> displacements;
  double compliance = 0.0;
  std::vector<double> element_energies;  // u_e^T k0 u_e, row-major like DensityField
  double relative_residual = 0.0;
  int solver_iterations = 0;
};

/// Repeated solves on one mesh and load case. The sparsity pattern and the
/// fill-reducing ordering are computed once; each solve only refills values.
/// Not safe for concurrent use; create one per thread.
class StiffnessSystem {
 public:
  StiffnessSystem(const MeshSpec& mesh, const LoadCase& load, const SolveOptions& options = {});
  ~StiffnessSystem();
  StiffnessSystem(StiffnessSystem&&) noexcept;
  StiffnessSystem& operator=(StiffnessSystem&&) noexcept;

  SolveResult solve(const DensityField& x, double penal);

  [[nodiscard]] const MeshSpec& mesh() const { return mesh_; }
  [[nodiscard]] const LoadCase& load() const { return load_; }
  [[nodiscard]] const ElementMatrix& element_matrix() const { return ke_; }

 private:
  struct Entry {
    int local = 0;  // i * 8 + j
    int slot = 0;   // index into the compressed value array
  };
  struct Factorization;

  void fill_values(const DensityField& x, double penal);

  MeshSpec mesh_;
  LoadCase load_;
  SolveOptions options_;
  ElementMatrix ke_;
  std::vector<int> free_index_;  // global dof -> reduced index, -1 when fixed
  std::vector<int> free_dofs_;
  Eigen::SparseMatrix<double> reduced_;  // lower triangle of K restricted to free dofs
  std::vector<std::vector<Entry>> element_entries_;
  Eigen::VectorXd rhs_;
  std::unique_ptr<Factorization> factor_;
};

/// Assemble K(x) with element stiffness scaled by x_e^penal and solve K U = F.
SolveResult assemble_solve(const MeshSpec& mesh, const DensityField& x, double penal, const LoadCase& load,
                           const SolveOptions& options = {});

/// dc/dx_e = -penal * x_e^(penal-1) * u_e^T k0 u_e.
DensityField compliance_sensitivity(const DensityField& x, const SolveResult& result, double penal);

}  // namespace topoforge::fem
