#include "topoforge/fem.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "topoforge/errors.hpp"

namespace topoforge::fem {

void MeshSpec::validate() const {
  if (nelx < 1 || nely < 1) {
    throw ParameterError("mesh needs at least one element per axis, got " + std::to_string(nelx) + "x" +
                         std::to_string(nely));
  }
  if (!(young > 0.0) || !std::isfinite(young)) throw ParameterError("young modulus must be > 0");
  if (!(poisson >= 0.0 && poisson < 0.5)) {
    throw ParameterError("poisson ratio must lie in [0, 0.5), got " + std::to_string(poisson));
  }
  if (!(thickness > 0.0) || !std::isfinite(thickness)) throw ParameterError("thickness must be > 0");
}

namespace {

// Rigid-body motion u = (a - t*y, b + t*x) vanishes on every fixed dof only when
// the 3-column constraint matrix has full rank.
bool constrains_rigid_modes(const MeshSpec& mesh, const std::vector<int>& fixed) {
  Eigen::Matrix3d gram = Eigen::Matrix3d::Zero();
  for (int dof : fixed) {
    const int node = dof / 2;
    const double col = node / (mesh.nely + 1);
    const double row = node % (mesh.nely + 1);
    Eigen::Vector3d r = (dof % 2 == 0) ? Eigen::Vector3d(1.0, 0.0, -row) : Eigen::Vector3d(0.0, 1.0, col);
    gram += r * r.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(gram, Eigen::EigenvaluesOnly);
  return eig.eigenvalues()(0) > 1e-9 * std::max(1.0, eig.eigenvalues()(2));
}

}  // namespace

void LoadCase::validate(const MeshSpec& mesh) const {
  const int ndof = mesh.dof_count();
  if (fixed_dofs.empty()) {
    throw SingularSystemError("load case has no fixed dofs; rigid-body modes make K singular");
  }
  std::set<int> fixed;
  for (int d : fixed_dofs) {
    if (d < 0 || d >= ndof) throw ParameterError("fixed dof " + std::to_string(d) + " out of range");
    fixed.insert(d);
  }
  for (const auto& l : loads) {
    if (l.dof < 0 || l.dof >= ndof) throw ParameterError("load dof " + std::to_string(l.dof) + " out of range");
    if (!std::isfinite(l.value)) throw ParameterError("load value must be finite");
    if (fixed.count(l.dof) != 0) {
      throw ParameterError("load applied to fixed dof " + std::to_string(l.dof));
    }
  }
  if (!constrains_rigid_modes(mesh, fixed_dofs)) {
    throw SingularSystemError("fixed dofs do not suppress all rigid-body modes; K is singular");
  }
}

LoadCase cantilever_load(const MeshSpec& mesh, double magnitude) {
  mesh.validate();
  LoadCase load;
  for (int row = 0; row <= mesh.nely; ++row) {
    const int node = mesh.node_index(0, row);
    load.fixed_dofs.push_back(2 * node);
    load.fixed_dofs.push_back(2 * node + 1);
  }
  const int tip = mesh.node_index(mesh.nelx, mesh.nely / 2);
  load.loads.push_back({2 * tip + 1, magnitude});
  return load;
}

ElementMatrix element_stiffness(double young, double poisson, double thickness) {
  if (!(poisson >= 0.0 && poisson < 0.5)) {
    throw ParameterError("poisson ratio must lie in [0, 0.5), got " + std::to_string(poisson));
  }
  if (!(young > 0.0)) throw ParameterError("young modulus must be > 0");
  const double nu = poisson;
  const double k[8] = {0.5 - nu / 6.0,         0.125 + nu / 8.0, -0.25 - nu / 12.0, -0.125 + 3.0 * nu / 8.0,
                       -0.25 + nu / 12.0,      -0.125 - nu / 8.0, nu / 6.0,         0.125 - 3.0 * nu / 8.0};
  // Index pattern of the closed-form matrix; entry (i, j) is k[pattern[i][j]].
  static constexpr int pattern[8][8] = {
      {0, 1, 2, 3, 4, 5, 6, 7}, {1, 0, 7, 6, 5, 4, 3, 2}, {2, 7, 0, 5, 6, 3, 4, 1}, {3, 6, 5, 0, 7, 2, 1, 4},
      {4, 5, 6, 7, 0, 1, 2, 3}, {5, 4, 3, 2, 1, 0, 7, 6}, {6, 3, 4, 1, 2, 7, 0, 5}, {7, 2, 1, 4, 3, 6, 5, 0}};
  const double scale = young * thickness / (1.0 - nu * nu);
  ElementMatrix ke;
  for (int i = 0; i < 8; ++i) {
    for (int j = 0; j < 8; ++j) ke(i, j) = scale * k[pattern[i][j]];
  }
  return ke;
}

std::array<int, 8> element_dofs(const MeshSpec& mesh, int elx, int ely) {
  const int n1 = mesh.node_index(elx, ely);
  const int n2 = mesh.node_index(elx + 1, ely);
  return {2 * n1, 2 * n1 + 1, 2 * n2, 2 * n2 + 1, 2 * n2 + 2, 2 * n2 + 3, 2 * n1 + 2, 2 * n1 + 3};
}

struct StiffnessSystem::Factorization {
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::AMDOrdering<int>> llt;
  bool analyzed = false;
};

StiffnessSystem::StiffnessSystem(const MeshSpec& mesh, const LoadCase& load, const SolveOptions& options)
    : mesh_(mesh), load_(load), options_(options), factor_(std::make_unique<Factorization>()) {
  mesh_.validate();
  load_.validate(mesh_);
  if (options_.solver == SolverKind::kDense && mesh_.element_count() > kDenseElementLimit) {
    throw ParameterError("dense solver limited to " + std::to_string(kDenseElementLimit) + " elements, mesh has " +
                         std::to_string(mesh_.element_count()));
  }
  ke_ = element_stiffness(mesh_.young, mesh_.poisson, mesh_.thickness);

  const int ndof = mesh_.dof_count();
  free_index_.assign(ndof, 0);
  for (int d : load_.fixed_dofs) free_index_[d] = -1;
  for (int d = 0; d < ndof; ++d) {
    if (free_index_[d] == 0) {
      free_index_[d] = static_cast<int>(free_dofs_.size());
      free_dofs_.push_back(d);
    }
  }
  const int nfree = static_cast<int>(free_dofs_.size());

  rhs_ = Eigen::VectorXd::Zero(nfree);
  for (const auto& l : load_.loads) rhs_(free_index_[l.dof]) += l.value;

  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(mesh_.element_count()) * 36);
  for (int elx = 0; elx < mesh_.nelx; ++elx) {
    for (int ely = 0; ely < mesh_.nely; ++ely) {
      const auto dofs = element_dofs(mesh_, elx, ely);
      for (int i = 0; i < 8; ++i) {
        const int r = free_index_[dofs[i]];
        if (r < 0) continue;
        for (int j = 0; j < 8; ++j) {
          const int c = free_index_[dofs[j]];
          if (c < 0 || r < c) continue;
          triplets.emplace_back(r, c, 1.0);
        }
      }
    }
  }
  reduced_.resize(nfree, nfree);
  reduced_.setFromTriplets(triplets.begin(), triplets.end());
  reduced_.makeCompressed();

  element_entries_.resize(static_cast<std::size_t>(mesh_.element_count()));
  const int* outer = reduced_.outerIndexPtr();
  const int* inner = reduced_.innerIndexPtr();
  for (int elx = 0; elx < mesh_.nelx; ++elx) {
    for (int ely = 0; ely < mesh_.nely; ++ely) {
      auto& entries = element_entries_[static_cast<std::size_t>(ely) * mesh_.nelx + elx];
      const auto dofs = element_dofs(mesh_, elx, ely);
      for (int i = 0; i < 8; ++i) {
        const int r = free_index_[dofs[i]];
        if (r < 0) continue;
        for (int j = 0; j < 8; ++j) {
          const int c = free_index_[dofs[j]];
          if (c < 0 || r < c) continue;
          const int* begin = inner + outer[c];
          const int* end = inner + outer[c + 1];
          const int* hit = std::lower_bound(begin, end, r);
          entries.push_back({i * 8 + j, static_cast<int>(hit - inner)});
        }
      }
    }
  }
}

StiffnessSystem::~StiffnessSystem() = default;
StiffnessSystem::StiffnessSystem(StiffnessSystem&&) noexcept = default;
StiffnessSystem& StiffnessSystem::operator=(StiffnessSystem&&) noexcept = default;

void StiffnessSystem::fill_values(const DensityField& x, double penal) {
  double* values = reduced_.valuePtr();
  std::fill(values, values + reduced_.nonZeros(), 0.0);
  for (std::size_t e = 0; e < element_entries_.size(); ++e) {
    const double s = std::pow(x.values[e], penal);
    for (const auto& entry : element_entries_[e]) values[entry.slot] += s * ke_(entry.local / 8, entry.local % 8);
  }
}

SolveResult StiffnessSystem::solve(const DensityField& x, double penal) {
  x.check_shape();
  if (x.nelx != mesh_.nelx || x.nely != mesh_.nely) {
    throw ShapeError("density field " + std::to_string(x.nelx) + "x" + std::to_string(x.nely) +
                     " does not match mesh " + std::to_string(mesh_.nelx) + "x" + std::to_string(mesh_.nely));
  }
  x.check_range(0.0, 1.0);
  if (!(penal >= 1.0) || !std::isfinite(penal)) {
    throw ParameterError("penalization power must be >= 1, got " + std::to_string(penal));
  }
  if (!(std::pow(x.max(), penal) > 0.0)) {
    throw SingularSystemError("all element densities are numerically zero; stiffness matrix is singular");
  }

  fill_values(x, penal);
  const Eigen::Index nfree = reduced_.rows();
  Eigen::VectorXd u_free = Eigen::VectorXd::Zero(nfree);
  SolveResult result;

  switch (options_.solver) {
    case SolverKind::kCholesky: {
      if (!factor_->analyzed) {
        factor_->llt.analyzePattern(reduced_);
        factor_->analyzed = true;
      }
      factor_->llt.factorize(reduced_);
      if (factor_->llt.info() != Eigen::Success) {
        throw SingularSystemError(
            "stiffness matrix is not positive definite (disconnected or zero-density region)");
      }
      u_free = factor_->llt.solve(rhs_);
      break;
    }
    case SolverKind::kConjugateGradient: {
      Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower, Eigen::DiagonalPreconditioner<double>> cg;
      cg.setTolerance(options_.cg_tolerance);
      cg.setMaxIterations(options_.cg_max_iterations > 0 ? options_.cg_max_iterations
                                                         : static_cast<int>(10 * nfree));
      cg.compute(reduced_);
      u_free = cg.solve(rhs_);
      result.solver_iterations = static_cast<int>(cg.iterations());
      if (cg.info() != Eigen::Success) {
        throw NumericError("conjugate gradient did not converge in " + std::to_string(cg.iterations()) +
                           " iterations (residual " + std::to_string(cg.error()) + ")");
      }
      break;
    }
    case SolverKind::kDense: {
      const Eigen::MatrixXd dense = Eigen::MatrixXd(reduced_).selfadjointView<Eigen::Lower>();
      Eigen::LLT<Eigen::MatrixXd> llt(dense);
      if (llt.info() != Eigen::Success) {
        throw SingularSystemError(
            "stiffness matrix is not positive definite (disconnected or zero-density region)");
      }
      u_free = llt.solve(rhs_);
      break;
    }
  }

  if (!u_free.allFinite()) throw NumericError("displacement solve produced non-finite values");
  const Eigen::VectorXd residual = reduced_.selfadjointView<Eigen::Lower>() * u_free - rhs_;
  const double fnorm = rhs_.norm();
  result.relative_residual = fnorm > 0.0 ? residual.norm() / fnorm : residual.norm();
  if (result.relative_residual > options_.residual_tolerance) {
    throw NumericError("solve residual " + std::to_string(result.relative_residual) + " exceeds tolerance");
  }

  result.displacements.assign(static_cast<std::size_t>(mesh_.dof_count()), 0.0);
  for (Eigen::Index i = 0; i < nfree; ++i) result.displacements[free_dofs_[i]] = u_free(i);

  result.compliance = 0.0;
  for (const auto& l : load_.loads) result.compliance += l.value * result.displacements[l.dof];

  result.element_energies.assign(static_cast<std::size_t>(mesh_.element_count()), 0.0);
  Eigen::Matrix<double, 8, 1> ue;
  for (int elx = 0; elx < mesh_.nelx; ++elx) {
    for (int ely = 0; ely < mesh_.nely; ++ely) {
      const auto dofs = element_dofs(mesh_, elx, ely);
      for (int i = 0; i < 8; ++i) ue(i) = result.displacements[dofs[i]];
      // Rounding can push a PSD quadratic form a hair below zero.
      result.element_energies[static_cast<std::size_t>(ely) * mesh_.nelx + elx] =
          std::max(0.0, ue.dot(ke_ * ue));
    }
  }
  return result;
}

SolveResult assemble_solve(const MeshSpec& mesh, const DensityField& x, double penal, const LoadCase& load,
                           const SolveOptions& options) {
  StiffnessSystem system(mesh, load, options);
  return system.solve(x, penal);
}

DensityField compliance_sensitivity(const DensityField& x, const SolveResult& result, double penal) {
  x.check_shape();
  if (result.element_energies.size() != x.values.size()) {
    throw ShapeError("solve result has " + std::to_string(result.element_energies.size()) +
                     " element energies but the density field has " + std::to_string(x.values.size()) +
                     " elements");
  }
  if (!(penal >= 1.0)) throw ParameterError("penalization power must be >= 1");
  DensityField dc(x.nelx, x.nely);
  for (std::size_t e = 0; e < x.values.size(); ++e) {
    dc.values[e] = -penal * std::pow(x.values[e], penal - 1.0) * result.element_energies[e];
  }
  return dc;
}

}  // namespace topoforge::fem
