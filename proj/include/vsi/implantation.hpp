#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace vsi {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

enum class PlanKind { array, stripe };

struct ImplantSpot {
  int spot_id = 0;
  Vec2 center_nm;
  std::int64_t dose = 0;  // ions
};

/// A set of implantation targets. Array plans keep their lattice pitch so
/// the lattice invariant can be checked; stripe plans keep their step.
struct ImplantPlan {
  PlanKind kind = PlanKind::array;
  double pitch_nm = 0.0;  // lattice pitch (array) or site step (stripe)
  std::vector<ImplantSpot> spots;

  /// Throws std::invalid_argument on negative dose, duplicate ids or
  /// off-lattice spots.
  void validate() const;
  const ImplantSpot* find(int spot_id) const;
};

/// Beam spot plus SRIM-style straggle, all Gaussian, all in nm.
struct BeamStraggleModel {
  double beam_sigma_nm = 7.5 / 2.354820045;  // 7.5 nm FWHM focus
  double depth_mean_nm = 18.5;
  double depth_sigma_nm = 7.0;
  double lateral_sigma_nm = 6.0;

  void validate() const;
  bool operator==(const BeamStraggleModel&) const = default;
  double lateral_total_sigma_nm() const;
};

/// Per-ion conversion probability y(d) = y0 / (1 + (d/d_c)^n).
struct DamageYieldModel {
  double y0 = 0.04;
  double d_c = 500.0;
  double n = 1.5;

  void validate() const;
  bool operator==(const DamageYieldModel&) const = default;
};

struct SpotIons {
  int spot_id = 0;
  std::int64_t dose = 0;
  std::vector<Vec3> positions_nm;
};

using IonPositions = std::vector<SpotIons>;

struct Defect {
  int spot_id = 0;
  Vec3 position_nm;
};

struct DefectMap {
  ImplantPlan plan;
  std::vector<Defect> defects;

  /// Defects per plan spot, indexed like plan.spots.
  std::vector<std::int64_t> counts_per_spot() const;
  void validate() const;
};

ImplantPlan plan_array(int rows, int cols, double pitch_um, std::int64_t dose);
ImplantPlan plan_stripe(double length_um, double width_um, double step_nm,
                        std::int64_t dose_per_site);

IonPositions sample_ion_positions(const ImplantPlan& plan,
                                  const BeamStraggleModel& model,
                                  std::uint64_t seed);

double yield_at_dose(const DamageYieldModel& model, double dose);

DefectMap convert_to_defects(const ImplantPlan& plan,
                             const IonPositions& positions,
                             const DamageYieldModel& model,
                             std::uint64_t seed);

/// Same as convert_to_defects but with a fixed per-ion probability in [0, 1].
DefectMap convert_with_probability(const ImplantPlan& plan,
                                   const IonPositions& positions,
                                   double probability, std::uint64_t seed);

// JSON document: {version, kind, pitch_nm, spots[], defects[]}.
inline constexpr int kDefectMapVersion = 1;

nlohmann::json to_json(const ImplantPlan& plan);
nlohmann::json to_json(const DefectMap& map);
ImplantPlan plan_from_json(const nlohmann::json& doc);
DefectMap defect_map_from_json(const nlohmann::json& doc);

std::string to_string(PlanKind kind);

}  // namespace vsi
