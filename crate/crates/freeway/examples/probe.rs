use freeway::fnc::{build_relaxed, discretize_network};
use freeway::scenario::Scenario;
use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    for name in ["artificial.json", "rocade.json"] {
        let s = Scenario::from_path(&dir.join(name)).unwrap();
        let net = s.to_network().unwrap();
        let demand = s.demand_schedule().unwrap();
        let opts = s.fnc_options();
        let dnet = discretize_network(&net, opts.pwa_segments).unwrap();
        let rp = build_relaxed(&dnet, &net, &demand, &opts).unwrap();
        println!(
            "{name}: lp rows {} cols {} nnz {} (stated {} vars {} cons)",
            rp.stats.lp_rows, rp.stats.lp_cols, rp.stats.lp_nonzeros,
            rp.stats.num_vars, rp.stats.num_constraints
        );
    }
}
