// Generates a small synthetic dataset, trains one probe per task and prints
// the cross-task AUROC matrix next to the probe cosine matrix.

#include <cstdio>

#include "probegeo/probegeo.hpp"

int main() {
  probegeo::SyntheticSpec spec;
  spec.d = 32;
  spec.tasks = 3;
  spec.n_per_task = 400;
  spec.direction_cosine = 0.5;
  const auto ds = probegeo::generate(spec);

  const auto views = probegeo::task_views(ds, probegeo::split(ds, probegeo::default_fractions(), 7));
  probegeo::ProbeTrainingConfig cfg;
  const auto probes = probegeo::per_task_probes(ds, views, cfg, 7);

  std::vector<probegeo::LabeledSet> tests;
  for (const auto& t : views.test) tests.push_back(probegeo::labeled(t));
  const auto auroc = probegeo::transfer_matrix(probes, tests, ds.task_names);
  const auto cos = probegeo::cosine_matrix(probes);

  std::printf("AUROC (rows: eval task, cols: training task)\n%s\n", probegeo::matrix_csv(auroc).c_str());
  std::printf("probe cosine\n%s", probegeo::matrix_csv(cos).c_str());
}
