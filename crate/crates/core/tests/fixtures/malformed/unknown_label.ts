# expect-error line 10
@problemName Bad
@dimensions 2
@equalLength true
@seriesLength 3
@classLabel true a b
@data
1,2,3:4,5,6:a
7,8,9:1,2,3:b
1,2,3:4,5,6:c
