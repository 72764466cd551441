use reactnet_core::network::*;

fn main() {
    let net = presets::ten_reaction_problem();
    let map = enumerate_clusters(&net, 20).unwrap();
    for (key, members) in &map.clusters {
        println!("{key}  ({} models)", members.len());
    }
}
