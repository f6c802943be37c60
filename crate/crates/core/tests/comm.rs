use std::collections::BTreeMap;

use modelpar::comm::{
    extract_stubs, restore_stubs, route, route_rule, BufferSide, ClusterShape, D2DBuffers, Device,
    LinkClass, LinkParams, Payload, Route, TensorDesc, TensorStub,
};
use proptest::prelude::*;

fn tensor() -> impl Strategy<Value = Payload> {
    (prop::collection::vec(1usize..8, 0..3), 0u64..1 << 20, any::<bool>()).prop_map(
        |(shape, bytes, on_gpu)| {
            Payload::Tensor(TensorDesc {
                shape,
                bytes,
                device: if on_gpu { Device::Gpu } else { Device::Cpu },
            })
        },
    )
}

fn payload() -> impl Strategy<Value = Payload> {
    let leaf = prop_oneof![
        tensor(),
        any::<i64>().prop_map(Payload::Int),
        (-1e6f64..1e6).prop_map(Payload::Float),
        "[a-z]{0,6}".prop_map(Payload::Str),
        any::<bool>().prop_map(Payload::Bool),
        Just(Payload::Null),
    ];
    leaf.prop_recursive(4, 64, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..6).prop_map(Payload::List),
            prop::collection::btree_map("[a-z]{1,4}", inner, 0..5).prop_map(Payload::Map),
        ]
    })
}

proptest! {
    #[test]
    fn stubs_roundtrip(p in payload()) {
        let (skeleton, stubs) = extract_stubs(&p);
        prop_assert_eq!(stubs.len(), p.tensor_count());
        prop_assert_eq!(skeleton.tensor_count(), 0);
        let ids: Vec<usize> = stubs.iter().map(|s| s.id).collect();
        prop_assert_eq!(ids, (0..stubs.len()).collect::<Vec<_>>());
        prop_assert_eq!(restore_stubs(&skeleton, &stubs).unwrap(), p);
    }

    #[test]
    fn transfer_time_is_monotone_in_bytes(
        a in 0u64..1 << 40,
        b in 0u64..1 << 40,
        latency in 0.0f64..1e-3,
        bandwidth in 1e6f64..1e12,
        static_mode in any::<bool>(),
    ) {
        let link = LinkParams { latency_s: latency, bandwidth_bps: bandwidth };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(
            modelpar::comm::transfer_time(lo, link, 1e-5, static_mode)
                <= modelpar::comm::transfer_time(hi, link, 1e-5, static_mode)
        );
    }

    #[test]
    fn buffers_never_exceed_capacity(
        ops in prop::collection::vec((0usize..4, 0usize..4, 1u64..400, any::<bool>()), 1..200),
    ) {
        let cluster = ClusterShape { ranks_per_node: 2, ..ClusterShape::default() };
        let mut buffers = D2DBuffers::new(4, 1000);
        let mut live = Vec::new();
        for (src, dst, bytes, release_first) in ops {
            if release_first && !live.is_empty() {
                let r: modelpar::comm::Reservation = live.remove(0);
                r.release(&mut buffers).unwrap();
            }
            if src == dst {
                continue;
            }
            let stub = TensorStub { id: 0, shape: vec![], bytes, device: Device::Gpu };
            if let Some(r) = route(&stub, src, dst, &cluster, &mut buffers).reservation {
                live.push(r);
            }
            for rank in 0..4 {
                prop_assert!(buffers.reserved(rank, BufferSide::Send) <= 1000);
                prop_assert!(buffers.reserved(rank, BufferSide::Recv) <= 1000);
            }
        }
        for r in live {
            r.release(&mut buffers).unwrap();
        }
        prop_assert!(buffers.is_empty());
    }
}

#[test]
fn nested_payload_roundtrip() {
    let t = |n: u64| {
        Payload::Tensor(TensorDesc {
            shape: vec![n as usize],
            bytes: n * 4,
            device: Device::Gpu,
        })
    };
    let mut c = BTreeMap::new();
    c.insert("c".to_string(), t(2));
    let mut b = BTreeMap::new();
    b.insert("b".to_string(), Payload::Map(c));
    let mut a = BTreeMap::new();
    a.insert("a".to_string(), Payload::List(vec![t(1)]));
    let p = Payload::List(vec![Payload::Map(a), Payload::Map(b)]);
    let (skeleton, stubs) = extract_stubs(&p);
    assert_eq!(stubs.len(), 2);
    assert_ne!(stubs[0].id, stubs[1].id);
    assert_eq!(restore_stubs(&skeleton, &stubs).unwrap(), p);

    let empty = Payload::List(vec![Payload::Int(3), Payload::Null]);
    let (skeleton, stubs) = extract_stubs(&empty);
    assert!(stubs.is_empty());
    assert_eq!(skeleton, empty);
}

/// Independent statement of the routing rule: MPI for CPU tensors, for
/// same-node pairs without NVLink, cross-node pairs without RDMA, and when
/// buffers are full.
fn expected(gpu: bool, same: bool, nvlink: bool, rdma: bool, buffers_ok: bool) -> Route {
    let mpi = !gpu || (same && !nvlink) || (!same && !rdma) || !buffers_ok;
    if mpi {
        Route::Mpi
    } else {
        Route::D2d
    }
}

#[test]
fn routing_table_covers_all_cases_through_the_router() {
    let mut checked = 0;
    for bits in 0..32u32 {
        let [gpu, same, nvlink, rdma, buffers_ok] = [0, 1, 2, 3, 4].map(|i| bits >> i & 1 == 1);
        let cluster = ClusterShape {
            ranks_per_node: 2,
            nvlink,
            rdma,
            d2d_buffer_bytes: 100,
            ..ClusterShape::default()
        };
        let mut buffers = D2DBuffers::new(4, 100);
        let (src, dst) = if same { (0, 1) } else { (0, 2) };
        if !buffers_ok {
            assert!(buffers.reserve(dst, BufferSide::Recv, 100));
            assert!(buffers.reserve(src, BufferSide::Send, 100));
        }
        let stub = TensorStub {
            id: 0,
            shape: vec![16],
            bytes: 64,
            device: if gpu { Device::Gpu } else { Device::Cpu },
        };
        let want = expected(gpu, same, nvlink, rdma, buffers_ok);
        let got = route(&stub, src, dst, &cluster, &mut buffers);
        assert_eq!(got.route, want, "case {bits:05b}");
        assert_eq!(route_rule(gpu, same, nvlink, rdma, buffers_ok), want);
        let link = match (got.route, same) {
            (Route::D2d, true) => LinkClass::Nvlink,
            (Route::D2d, false) => LinkClass::Rdma,
            (Route::Mpi, true) => LinkClass::PcieMpiIntra,
            (Route::Mpi, false) => LinkClass::MpiInter,
        };
        assert_eq!(got.link, link);
        assert_eq!(got.reservation.is_some(), want == Route::D2d);
        checked += 1;
    }
    assert_eq!(checked, 32);
}
