#include "vsi/implantation.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "vsi/random.hpp"

namespace vsi {

namespace {

// Guards floor(length/step) against 0.04*1000 = 40.000000000000007 style noise.
std::int64_t sites_along(double extent_nm, double step_nm) {
  return static_cast<std::int64_t>(std::floor(extent_nm / step_nm + 1e-9)) + 1;
}

}  // namespace

std::string to_string(PlanKind kind) {
  return kind == PlanKind::array ? "array" : "stripe";
}

const ImplantSpot* ImplantPlan::find(int spot_id) const {
  for (const auto& s : spots)
    if (s.spot_id == spot_id) return &s;
  return nullptr;
}

void ImplantPlan::validate() const {
  std::unordered_set<int> ids;
  for (const auto& s : spots) {
    if (s.dose < 0)
      throw std::invalid_argument("spot " + std::to_string(s.spot_id) +
                                  " has negative dose");
    if (!ids.insert(s.spot_id).second)
      throw std::invalid_argument("duplicate spot id " +
                                  std::to_string(s.spot_id));
  }
  if (kind == PlanKind::array && spots.size() > 1) {
    if (!(pitch_nm > 0.0))
      throw std::invalid_argument("array plan requires a positive pitch");
    const Vec2 origin = spots.front().center_nm;
    for (const auto& s : spots) {
      const double fx = (s.center_nm.x - origin.x) / pitch_nm;
      const double fy = (s.center_nm.y - origin.y) / pitch_nm;
      if (std::abs(fx - std::round(fx)) > 1e-6 ||
          std::abs(fy - std::round(fy)) > 1e-6)
        throw std::invalid_argument("spot " + std::to_string(s.spot_id) +
                                    " is off the array lattice");
    }
  }
}

void BeamStraggleModel::validate() const {
  if (!(beam_sigma_nm > 0.0 && depth_mean_nm > 0.0 && depth_sigma_nm > 0.0 &&
        lateral_sigma_nm > 0.0))
    throw std::invalid_argument("beam/straggle parameters must all be > 0");
}

double BeamStraggleModel::lateral_total_sigma_nm() const {
  return std::hypot(beam_sigma_nm, lateral_sigma_nm);
}

void DamageYieldModel::validate() const {
  if (!(y0 > 0.0 && y0 <= 1.0))
    throw std::invalid_argument("yield y0 must be in (0, 1]");
  if (!(d_c > 0.0)) throw std::invalid_argument("damage onset d_c must be > 0");
  if (!(n >= 1.0)) throw std::invalid_argument("roll-off exponent n must be >= 1");
}

std::vector<std::int64_t> DefectMap::counts_per_spot() const {
  std::unordered_map<int, std::size_t> index;
  for (std::size_t i = 0; i < plan.spots.size(); ++i)
    index[plan.spots[i].spot_id] = i;
  std::vector<std::int64_t> counts(plan.spots.size(), 0);
  for (const auto& d : defects) {
    auto it = index.find(d.spot_id);
    if (it == index.end())
      throw std::invalid_argument("defect references unknown spot " +
                                  std::to_string(d.spot_id));
    ++counts[it->second];
  }
  return counts;
}

void DefectMap::validate() const {
  plan.validate();
  const auto counts = counts_per_spot();
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] > plan.spots[i].dose)
      throw std::invalid_argument("spot " +
                                  std::to_string(plan.spots[i].spot_id) +
                                  " has more defects than ions");
}

ImplantPlan plan_array(int rows, int cols, double pitch_um, std::int64_t dose) {
  if (rows < 1 || cols < 1)
    throw std::invalid_argument("plan_array: rows and cols must be >= 1");
  if (!(pitch_um > 0.0))
    throw std::invalid_argument("plan_array: pitch must be > 0");
  if (dose < 0) throw std::invalid_argument("plan_array: dose must be >= 0");

  ImplantPlan plan;
  plan.kind = PlanKind::array;
  plan.pitch_nm = pitch_um * 1000.0;
  plan.spots.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      plan.spots.push_back({r * cols + c,
                            {c * plan.pitch_nm, r * plan.pitch_nm},
                            dose});
  return plan;
}

ImplantPlan plan_stripe(double length_um, double width_um, double step_nm,
                        std::int64_t dose_per_site) {
  if (!(length_um > 0.0 && width_um > 0.0))
    throw std::invalid_argument("plan_stripe: length and width must be > 0");
  if (!(step_nm > 0.0))
    throw std::invalid_argument("plan_stripe: step must be > 0");
  if (dose_per_site < 0)
    throw std::invalid_argument("plan_stripe: dose must be >= 0");
  const double length_nm = length_um * 1000.0;
  const double width_nm = width_um * 1000.0;
  if (step_nm > length_nm + 1e-9 || step_nm > width_nm + 1e-9)
    throw std::invalid_argument(
        "plan_stripe: step larger than the stripe dimensions");

  const auto nx = sites_along(length_nm, step_nm);
  const auto ny = sites_along(width_nm, step_nm);
  ImplantPlan plan;
  plan.kind = PlanKind::stripe;
  plan.pitch_nm = step_nm;
  plan.spots.reserve(static_cast<std::size_t>(nx * ny));
  int id = 0;
  for (std::int64_t j = 0; j < ny; ++j)
    for (std::int64_t i = 0; i < nx; ++i)
      plan.spots.push_back({id++,
                            {static_cast<double>(i) * step_nm,
                             static_cast<double>(j) * step_nm},
                            dose_per_site});
  return plan;
}

IonPositions sample_ion_positions(const ImplantPlan& plan,
                                  const BeamStraggleModel& model,
                                  std::uint64_t seed) {
  plan.validate();
  model.validate();
  const double sigma_xy = model.lateral_total_sigma_nm();

  IonPositions out;
  out.reserve(plan.spots.size());
  for (const auto& spot : plan.spots) {
    auto rng = substream(seed, "implant.ions",
                         static_cast<std::uint64_t>(spot.spot_id));
    std::normal_distribution<double> lateral(0.0, sigma_xy);
    std::normal_distribution<double> depth(model.depth_mean_nm,
                                           model.depth_sigma_nm);
    SpotIons ions{spot.spot_id, spot.dose, {}};
    ions.positions_nm.reserve(static_cast<std::size_t>(spot.dose));
    for (std::int64_t i = 0; i < spot.dose; ++i) {
      const double x = spot.center_nm.x + lateral(rng);
      const double y = spot.center_nm.y + lateral(rng);
      const double z = depth(rng);
      ions.positions_nm.push_back({x, y, z});
    }
    out.push_back(std::move(ions));
  }
  return out;
}

double yield_at_dose(const DamageYieldModel& model, double dose) {
  if (!(dose >= 0.0)) throw std::invalid_argument("yield_at_dose: dose < 0");
  return model.y0 / (1.0 + std::pow(dose / model.d_c, model.n));
}

namespace {

template <class ProbabilityFn>
DefectMap convert_impl(const ImplantPlan& plan, const IonPositions& positions,
                       std::uint64_t seed, ProbabilityFn probability_for) {
  DefectMap map;
  map.plan = plan;
  std::unordered_map<int, const ImplantSpot*> by_id;
  for (const auto& s : plan.spots) by_id[s.spot_id] = &s;
  for (const auto& spot : positions) {
    const auto it = by_id.find(spot.spot_id);
    if (it == by_id.end())
      throw std::invalid_argument("ion list references unknown spot " +
                                  std::to_string(spot.spot_id));
    const double p = probability_for(*it->second);
    auto rng = substream(seed, "implant.convert",
                         static_cast<std::uint64_t>(spot.spot_id));
    std::bernoulli_distribution becomes_defect(p);
    for (const auto& pos : spot.positions_nm)
      if (becomes_defect(rng)) map.defects.push_back({spot.spot_id, pos});
  }
  return map;
}

}  // namespace

DefectMap convert_to_defects(const ImplantPlan& plan,
                             const IonPositions& positions,
                             const DamageYieldModel& model,
                             std::uint64_t seed) {
  model.validate();
  return convert_impl(plan, positions, seed, [&](const ImplantSpot& s) {
    return yield_at_dose(model, static_cast<double>(s.dose));
  });
}

DefectMap convert_with_probability(const ImplantPlan& plan,
                                   const IonPositions& positions,
                                   double probability, std::uint64_t seed) {
  if (!(probability >= 0.0 && probability <= 1.0))
    throw std::invalid_argument("conversion probability must be in [0, 1]");
  return convert_impl(plan, positions, seed,
                      [&](const ImplantSpot&) { return probability; });
}

// ---- serialization ----

nlohmann::json to_json(const ImplantPlan& plan) {
  nlohmann::json spots = nlohmann::json::array();
  for (const auto& s : plan.spots)
    spots.push_back({{"spot_id", s.spot_id},
                     {"center_nm", {s.center_nm.x, s.center_nm.y}},
                     {"dose", s.dose}});
  return {{"version", kDefectMapVersion},
          {"kind", to_string(plan.kind)},
          {"pitch_nm", plan.pitch_nm},
          {"spots", std::move(spots)},
          {"defects", nlohmann::json::array()}};
}

nlohmann::json to_json(const DefectMap& map) {
  auto doc = to_json(map.plan);
  auto& defects = doc["defects"];
  for (const auto& d : map.defects)
    defects.push_back(
        {{"spot_id", d.spot_id},
         {"position_nm", {d.position_nm.x, d.position_nm.y, d.position_nm.z}}});
  return doc;
}

ImplantPlan plan_from_json(const nlohmann::json& doc) {
  if (doc.at("version").get<int>() != kDefectMapVersion)
    throw std::invalid_argument("unsupported plan document version");
  ImplantPlan plan;
  const auto kind = doc.at("kind").get<std::string>();
  if (kind == "array")
    plan.kind = PlanKind::array;
  else if (kind == "stripe")
    plan.kind = PlanKind::stripe;
  else
    throw std::invalid_argument("unknown plan kind '" + kind + "'");
  plan.pitch_nm = doc.value("pitch_nm", 0.0);
  for (const auto& s : doc.at("spots")) {
    const auto& c = s.at("center_nm");
    plan.spots.push_back({s.at("spot_id").get<int>(),
                          {c.at(0).get<double>(), c.at(1).get<double>()},
                          s.at("dose").get<std::int64_t>()});
  }
  plan.validate();
  return plan;
}

DefectMap defect_map_from_json(const nlohmann::json& doc) {
  DefectMap map;
  map.plan = plan_from_json(doc);
  for (const auto& d : doc.at("defects")) {
    const auto& p = d.at("position_nm");
    map.defects.push_back({d.at("spot_id").get<int>(),
                           {p.at(0).get<double>(), p.at(1).get<double>(),
                            p.at(2).get<double>()}});
  }
  map.validate();
  return map;
}

}  // namespace vsi
